from django.apps import AppConfig


class CaptureConfig(AppConfig):
    default_auto_field: str = "django.db.models.BigAutoField"
    name: str = "capture"
    verbose_name: str = "ASV capture workbench"
