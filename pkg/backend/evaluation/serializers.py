from rest_framework import serializers

from .metrics import DEFAULT_BUDGETS


class EvalSectionSerializer(serializers.Serializer):
    """[eval] section: operating point fallback, budgets and report rendering"""

    fallback_threshold = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    budgets = serializers.ListField(
        child=serializers.FloatField(min_value=0.0, max_value=1.0), default=list(DEFAULT_BUDGETS), allow_empty=False
    )
    batch_size = serializers.IntegerField(default=256, min_value=1)
    render_reports = serializers.BooleanField(default=True)

    def validate_budgets(self, value):
        if any(budget <= 0.0 for budget in value):
            raise serializers.ValidationError('Budgets must be positive fractions')
        return sorted(value)
