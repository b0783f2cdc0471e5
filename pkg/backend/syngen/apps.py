from django.apps import AppConfig


class SyngenConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'syngen'
    verbose_name = 'Synthetic corpora'
