from django.contrib import admin

from .models import ExperimentRun, SweepCell


class SweepCellInline(admin.TabularInline):
    model = SweepCell
    extra = 0
    fields = ("index", "Omega", "eps", "seed", "status", "stable", "bounded", "peak_E", "failure_time")
    readonly_fields = fields
    can_delete = False


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("id", "kind", "status", "exit_code", "config_hash", "created_at", "finished_at")
    list_filter = ("kind", "status", "created_at")
    search_fields = ("id", "config_hash", "output_dir")
    readonly_fields = ("config_hash", "summary", "exit_code", "error_message", "started_at", "finished_at")
    inlines = [SweepCellInline]


@admin.register(SweepCell)
class SweepCellAdmin(admin.ModelAdmin):
    list_display = ("run", "index", "Omega", "eps", "seed", "status", "stable", "bounded", "peak_E")
    list_filter = ("status", "stable", "bounded")
    search_fields = ("run__id", "run__config_hash")
