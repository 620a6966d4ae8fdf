from django.apps import AppConfig


class NetcoreConfig(AppConfig):
    name = "apps.netcore"
    label = "netcore"
    verbose_name = "Network core"
