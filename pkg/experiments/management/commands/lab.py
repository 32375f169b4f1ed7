import logging

from django.core.management.base import BaseCommand, CommandError

from experiments import services
from experiments.errors import LabError
from experiments.models import EXPERIMENT_KIND_CHOICES

logger = logging.getLogger(__name__)

KINDS = [kind for kind, _ in EXPERIMENT_KIND_CHOICES]


class Command(BaseCommand):
    help = "Run one lab experiment and write its reports to the output directory."

    def add_arguments(self, parser):
        parser.add_argument("kind", choices=KINDS)
        parser.add_argument("--config", help="JSON config file; its keys are overridden by --set")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable, VALUE parsed as JSON when possible)",
        )
        parser.add_argument("--output", help="output directory (default LAB_OUTPUT_ROOT/<kind>/<hash>)")
        parser.add_argument("--backend", choices=["local", "celery"], help="sweep cell backend")

    def handle(self, *args, **options):
        kind = options["kind"]
        try:
            raw = services.load_config_file(options["config"]) if options["config"] else {}
            raw["kind"] = kind
            if options["output"]:
                raw["output"] = options["output"]
            outcome = services.run(raw, options["overrides"], sweep_backend=options["backend"])
        except LabError as exc:
            logger.warning("lab_rejected kind=%s exit=%s error=%s", kind, exc.exit_code, exc)
            raise CommandError(str(exc), returncode=exc.exit_code)

        if outcome.checks:
            self.stdout.write(services.summary_table(outcome.checks))
        self.stdout.write(f"output: {outcome.output_dir}")
        if outcome.exit_code != services.EXIT_OK:
            raise CommandError(outcome.error or "one or more checks failed", returncode=outcome.exit_code)
        self.stdout.write(self.style.SUCCESS(f"{kind} done ({outcome.run.config_hash[:16]})"))
