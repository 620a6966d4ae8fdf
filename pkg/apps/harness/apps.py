from django.apps import AppConfig


class HarnessConfig(AppConfig):
    name = "apps.harness"
    label = "harness"
    verbose_name = "Experiment harness"
