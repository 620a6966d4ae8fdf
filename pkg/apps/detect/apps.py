from django.apps import AppConfig


class DetectConfig(AppConfig):
    name = "apps.detect"
    label = "detect"
    verbose_name = "Shift detectors"
