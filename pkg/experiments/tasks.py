import logging

from celery import shared_task
from django.db import transaction
from django.utils import timezone

from . import services
from .models import ExperimentRun, RunStatus, SweepCell

logger = logging.getLogger(__name__)


@shared_task(bind=True)
def run_experiment_task(self, run_id, *, force=False):
    with transaction.atomic():
        try:
            run = ExperimentRun.objects.select_for_update().get(id=run_id)
        except ExperimentRun.DoesNotExist:
            logger.warning("task_skip run=%s reason=missing", run_id)
            return {"skipped": True, "reason": "missing"}

        if run.status == RunStatus.RUNNING:
            logger.info("task_skip run=%s reason=already_running", run_id)
            return {"skipped": True, "reason": "already_running"}

        if run.status == RunStatus.DONE and not force:
            logger.info("task_skip run=%s reason=already_done", run_id)
            return {"skipped": True, "reason": "already_done"}

        run.mark_running()
        run.save()

    outcome = services.execute(run)
    logger.info("task_done run=%s exit=%s task=%s", run_id, outcome.exit_code, getattr(self.request, "id", "-"))
    return {"ok": outcome.exit_code == services.EXIT_OK, "exit_code": outcome.exit_code}


@shared_task(bind=True, autoretry_for=(OSError,), retry_backoff=True, max_retries=3)
def probe_cell_task(self, cell_id):
    with transaction.atomic():
        try:
            cell = SweepCell.objects.select_for_update().get(id=cell_id)
        except SweepCell.DoesNotExist:
            logger.warning("task_skip cell=%s reason=missing", cell_id)
            return {"skipped": True, "reason": "missing"}

        if cell.status == RunStatus.DONE:
            logger.info("task_skip cell=%s reason=already_done", cell_id)
            return {"skipped": True, "reason": "already_done"}

        cell.status = RunStatus.RUNNING
        cell.save(update_fields=["status"])

    try:
        row = services.execute_cell(cell_id)
    except Exception as exc:
        SweepCell.objects.filter(id=cell_id).update(
            status=RunStatus.FAILED,
            finished_at=timezone.now(),
            error_message=(str(exc) or "")[:5000],
        )
        logger.exception("probe_cell_failed cell=%s task=%s", cell_id, getattr(self.request, "id", "-"))
        raise
    return row
