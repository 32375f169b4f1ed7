import os

from celery import Celery

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "coriolis_lab.settings")

app = Celery("coriolis_lab")
app.config_from_object("django.conf:settings", namespace="CELERY")
app.autodiscover_tasks(["experiments"])

# sweep cells are short and numerous; whole runs go to their own queue
app.conf.task_routes = {
    "experiments.tasks.probe_cell_task": {"queue": "cells"},
    "experiments.tasks.run_experiment_task": {"queue": "runs"},
}
