# Generated by Django 5.1.7 on 2026-10-18 09:20

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EvaluationReport',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('grounding', 'Ancrage visuel'), ('probe_grounding', 'Ancrage du classifieur linéaire'), ('backgrounds', 'Arrière-plans'), ('visualize', 'Visualisation'), ('crop_stats', 'Statistiques de recadrage')], max_length=20)),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('data_dir', models.CharField(max_length=500)),
                ('output_path', models.CharField(max_length=500)),
                ('seed', models.IntegerField(default=0)),
                ('sample_count', models.PositiveIntegerField(default=0)),
                ('mean_iou', models.FloatField(blank=True, null=True)),
                ('summary', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('output_dir', models.CharField(max_length=500)),
                ('config_text', models.TextField()),
                ('seed', models.IntegerField(default=0)),
                ('lam', models.FloatField(default=3.0)),
                ('phi', models.FloatField(default=0.2)),
                ('status', models.CharField(choices=[('running', 'En cours'), ('stopped', 'Interrompu'), ('finished', 'Terminé'), ('failed', 'Échoué')], default='running', max_length=20)),
                ('steps_completed', models.PositiveIntegerField(default=0)),
                ('total_steps', models.PositiveIntegerField(default=0)),
                ('last_loss', models.FloatField(blank=True, null=True)),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('resumed', models.BooleanField(default=False)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
