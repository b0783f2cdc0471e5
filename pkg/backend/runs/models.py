from django.db import models


class ExperimentRun(models.Model):
    """Registry mirror of one run directory's manifest"""

    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    name = models.CharField(max_length=64)
    command = models.CharField(max_length=32)
    source = models.CharField(max_length=16, default='syngen')
    seed = models.IntegerField(default=0)
    stage_plan = models.CharField(max_length=8, default='123')
    stage_reached = models.CharField(max_length=8, blank=True)
    config_hash = models.CharField(max_length=64, db_index=True)
    code_version = models.CharField(max_length=32)
    run_dir = models.CharField(max_length=500, unique=True)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')
    metrics = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = 'experiment_runs'
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} seed={self.seed} ({self.status})"

    @property
    def auc(self):
        return self.metrics.get('auc')


class StageCheckpoint(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='checkpoints')
    stage = models.CharField(max_length=8)
    path = models.CharField(max_length=500)
    epochs = models.IntegerField(default=0)
    monitor = models.CharField(max_length=16, blank=True)
    best_value = models.FloatField(null=True, blank=True)
    tau_c = models.FloatField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        db_table = 'stage_checkpoints'
        ordering = ['run', 'created_at']
        unique_together = ['run', 'stage']

    def __str__(self):
        return f"{self.run.name} stage {self.stage}"
