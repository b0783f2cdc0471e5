from rest_framework import serializers

from training.services import STAGE_PLANS


class RunSectionSerializer(serializers.Serializer):
    """[run] section: what to run and where the corpus comes from"""

    SOURCE_CHOICES = ['syngen', 'cert']

    name = serializers.RegexField(r'^[A-Za-z0-9_.-]+$', default='rmsl', max_length=64)
    source = serializers.ChoiceField(choices=SOURCE_CHOICES, default='syngen')
    seed = serializers.IntegerField(default=0, min_value=0)
    stages = serializers.ChoiceField(choices=sorted(STAGE_PLANS), default='123')
    corpus_dir = serializers.CharField(required=False, allow_blank=True, default='')
    device = serializers.CharField(required=False, allow_blank=True, default='')
