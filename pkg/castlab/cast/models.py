from django.db import models


class TrainingRun(models.Model):
    STATUS_CHOICES = [
        ('running', 'En cours'),
        ('stopped', 'Interrompu'),
        ('finished', 'Terminé'),
        ('failed', 'Échoué'),
    ]

    output_dir = models.CharField(max_length=500)
    config_text = models.TextField()
    seed = models.IntegerField(default=0)
    lam = models.FloatField(default=3.0)
    phi = models.FloatField(default=0.2)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    steps_completed = models.PositiveIntegerField(default=0)
    total_steps = models.PositiveIntegerField(default=0)
    last_loss = models.FloatField(null=True, blank=True)
    checkpoint_path = models.CharField(max_length=500, blank=True)
    resumed = models.BooleanField(default=False)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self):
        return f"Entraînement #{self.id} - {self.output_dir} ({self.get_status_display()})"

    class Meta:
        ordering = ['-created_at']


class EvaluationReport(models.Model):
    KIND_CHOICES = [
        ('grounding', 'Ancrage visuel'),
        ('probe_grounding', 'Ancrage du classifieur linéaire'),
        ('backgrounds', 'Arrière-plans'),
        ('visualize', 'Visualisation'),
        ('crop_stats', 'Statistiques de recadrage'),
    ]

    kind = models.CharField(max_length=20, choices=KIND_CHOICES)
    checkpoint_path = models.CharField(max_length=500, blank=True)
    data_dir = models.CharField(max_length=500)
    output_path = models.CharField(max_length=500)
    seed = models.IntegerField(default=0)
    sample_count = models.PositiveIntegerField(default=0)
    mean_iou = models.FloatField(null=True, blank=True)
    summary = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f"{self.get_kind_display()} - {self.checkpoint_path or self.data_dir}"

    class Meta:
        ordering = ['-created_at']
