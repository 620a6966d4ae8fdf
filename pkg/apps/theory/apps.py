from django.apps import AppConfig


class TheoryAppConfig(AppConfig):
    name = "apps.theory"
    label = "theory"
    verbose_name = "Regret theory checks"
