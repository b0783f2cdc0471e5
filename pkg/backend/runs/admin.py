from django.contrib import admin
from .models import ExperimentRun, StageCheckpoint


class StageCheckpointInline(admin.TabularInline):
    model = StageCheckpoint
    extra = 0
    readonly_fields = ['stage', 'path', 'epochs', 'monitor', 'best_value', 'tau_c', 'created_at']


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['name', 'command', 'source', 'seed', 'stage_plan', 'stage_reached', 'status', 'auc', 'created_at']
    list_filter = ['status', 'source', 'command', 'stage_plan']
    search_fields = ['name', 'config_hash', 'run_dir']
    readonly_fields = ['config_hash', 'code_version', 'run_dir', 'metrics', 'created_at', 'finished_at']
    inlines = [StageCheckpointInline]


@admin.register(StageCheckpoint)
class StageCheckpointAdmin(admin.ModelAdmin):
    list_display = ['run', 'stage', 'epochs', 'monitor', 'best_value', 'tau_c', 'created_at']
    list_filter = ['stage']
    search_fields = ['run__name', 'path']
