import uuid

from django.db import models
from django.utils import timezone

EXPERIMENT_KIND_CHOICES = [
    ("symbol", "Symbol and quartic"),
    ("linear-decay", "Linear decay"),
    ("strichartz", "Strichartz scaling"),
    ("simulate", "Simulation"),
    ("norms", "Solution norms"),
    ("apriori", "A priori diagnostic"),
    ("sweep", "Regime sweep"),
    ("verify-all", "Property suites"),
]


class RunStatus(models.TextChoices):
    PENDING = "PENDING", "Pending"
    RUNNING = "RUNNING", "Running"
    DONE = "DONE", "Done"
    FAILED = "FAILED", "Failed"


class ExperimentRun(models.Model):
    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    kind = models.CharField(max_length=24, choices=EXPERIMENT_KIND_CHOICES)
    status = models.CharField(max_length=16, choices=RunStatus.choices, default=RunStatus.PENDING)

    config = models.JSONField(default=dict)
    config_hash = models.CharField(max_length=64, db_index=True)
    output_dir = models.CharField(max_length=500, blank=True, default="")

    summary = models.JSONField(null=True, blank=True)
    exit_code = models.PositiveSmallIntegerField(null=True, blank=True)
    error_message = models.TextField(blank=True, default="")

    created_at = models.DateTimeField(auto_now_add=True)
    started_at = models.DateTimeField(null=True, blank=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ["-created_at"]

    def mark_running(self):
        self.status = RunStatus.RUNNING
        self.started_at = timezone.now()
        self.finished_at = None
        self.summary = None
        self.exit_code = None
        self.error_message = ""

    def mark_done(self, summary: dict):
        self.status = RunStatus.DONE
        self.summary = summary
        self.exit_code = 0
        self.finished_at = timezone.now()
        self.error_message = ""

    def mark_failed(self, msg: str, exit_code: int, summary: dict | None = None):
        self.status = RunStatus.FAILED
        self.summary = summary
        self.exit_code = exit_code
        self.finished_at = timezone.now()
        self.error_message = (msg or "")[:5000]

    def __str__(self):
        return f"{self.kind} ({self.config_hash[:12]})"


class SweepCell(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="cells")
    index = models.PositiveIntegerField()
    Omega = models.FloatField()
    eps = models.FloatField()
    seed = models.IntegerField(default=0)
    status = models.CharField(max_length=16, choices=RunStatus.choices, default=RunStatus.PENDING)

    stable = models.BooleanField(null=True, blank=True)
    bounded = models.BooleanField(null=True, blank=True)
    peak_E = models.FloatField(null=True, blank=True)
    E_ref = models.FloatField(null=True, blank=True)
    failure_time = models.FloatField(null=True, blank=True)
    error_message = models.TextField(blank=True, default="")
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ["run", "index"]
        constraints = [
            models.UniqueConstraint(fields=["run", "index"], name="sweep_cell_run_index"),
        ]

    def apply_result(self, result):
        self.status = RunStatus.DONE if not result.error or result.failure_time is not None else RunStatus.FAILED
        self.stable = result.stable
        self.bounded = result.bounded
        self.peak_E = result.peak_E
        self.E_ref = result.E_ref
        self.failure_time = result.failure_time
        self.error_message = (result.error or "")[:5000]
        self.finished_at = timezone.now()

    def __str__(self):
        return f"SweepCell({self.run_id}, Omega={self.Omega}, eps={self.eps}, seed={self.seed})"
