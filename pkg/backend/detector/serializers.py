from rest_framework import serializers


class ModelSectionSerializer(serializers.Serializer):
    """[model] section: network shape and the dual-score balance"""

    embedding_dim = serializers.IntegerField(default=128, min_value=1)
    hidden_size = serializers.IntegerField(default=128, min_value=1)
    context_dim = serializers.IntegerField(default=128, min_value=1)
    num_prototypes = serializers.IntegerField(default=40, min_value=1)
    dropout = serializers.FloatField(default=0.1, min_value=0.0)
    alpha = serializers.FloatField(default=0.6, min_value=0.0, max_value=1.0)

    def validate_dropout(self, value):
        if value >= 1.0:
            raise serializers.ValidationError('Must be below 1')
        return value
