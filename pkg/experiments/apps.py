from django.apps import AppConfig


class ExperimentsConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "experiments"

    def ready(self):
        from django.conf import settings

        from . import linsymbol, lp_besov

        lp_besov.configure_fft(getattr(settings, "LAB_FFT_WORKERS", 1))
        linsymbol.configure_expm(getattr(settings, "LAB_EXPM_COND_LIMIT", None))
