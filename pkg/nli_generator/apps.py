from django.apps import AppConfig


class NliGeneratorConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'nli_generator'
    verbose_name = 'NLI hypothesis generation'
