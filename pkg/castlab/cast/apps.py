from django.apps import AppConfig


class CastConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'cast'
    verbose_name = 'Contrastive attention supervision'
