from django.apps import AppConfig


class LearnerConfig(AppConfig):
    name = "apps.learner"
    label = "learner"
    verbose_name = "Meta learners"
