import uuid

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('kind', models.CharField(choices=[('symbol', 'Symbol and quartic'), ('linear-decay', 'Linear decay'), ('strichartz', 'Strichartz scaling'), ('simulate', 'Simulation'), ('norms', 'Solution norms'), ('apriori', 'A priori diagnostic'), ('sweep', 'Regime sweep'), ('verify-all', 'Property suites')], max_length=24)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('RUNNING', 'Running'), ('DONE', 'Done'), ('FAILED', 'Failed')], default='PENDING', max_length=16)),
                ('config', models.JSONField(default=dict)),
                ('config_hash', models.CharField(db_index=True, max_length=64)),
                ('output_dir', models.CharField(blank=True, default='', max_length=500)),
                ('summary', models.JSONField(blank=True, null=True)),
                ('exit_code', models.PositiveSmallIntegerField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('started_at', models.DateTimeField(blank=True, null=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='SweepCell',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('index', models.PositiveIntegerField()),
                ('Omega', models.FloatField()),
                ('eps', models.FloatField()),
                ('seed', models.IntegerField(default=0)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('RUNNING', 'Running'), ('DONE', 'Done'), ('FAILED', 'Failed')], default='PENDING', max_length=16)),
                ('stable', models.BooleanField(blank=True, null=True)),
                ('bounded', models.BooleanField(blank=True, null=True)),
                ('peak_E', models.FloatField(blank=True, null=True)),
                ('E_ref', models.FloatField(blank=True, null=True)),
                ('failure_time', models.FloatField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, default='')),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='cells', to='experiments.experimentrun')),
            ],
            options={
                'ordering': ['run', 'index'],
                'constraints': [models.UniqueConstraint(fields=('run', 'index'), name='sweep_cell_run_index')],
            },
        ),
    ]
