from django.apps import AppConfig


class StreamAppConfig(AppConfig):
    name = "apps.stream"
    label = "stream"
    verbose_name = "Episode stream"
