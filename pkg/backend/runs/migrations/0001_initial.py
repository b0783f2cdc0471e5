from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=64)),
                ('command', models.CharField(max_length=32)),
                ('source', models.CharField(default='syngen', max_length=16)),
                ('seed', models.IntegerField(default=0)),
                ('stage_plan', models.CharField(default='123', max_length=8)),
                ('stage_reached', models.CharField(blank=True, max_length=8)),
                ('config_hash', models.CharField(db_index=True, max_length=64)),
                ('code_version', models.CharField(max_length=32)),
                ('run_dir', models.CharField(max_length=500, unique=True)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'db_table': 'experiment_runs',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='StageCheckpoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('stage', models.CharField(max_length=8)),
                ('path', models.CharField(max_length=500)),
                ('epochs', models.IntegerField(default=0)),
                ('monitor', models.CharField(blank=True, max_length=16)),
                ('best_value', models.FloatField(blank=True, null=True)),
                ('tau_c', models.FloatField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='checkpoints', to='runs.experimentrun')),
            ],
            options={
                'db_table': 'stage_checkpoints',
                'ordering': ['run', 'created_at'],
                'unique_together': {('run', 'stage')},
            },
        ),
    ]
