from rest_framework import serializers


class TrainSectionSerializer(serializers.Serializer):
    """[train] section: optimisation and pseudo-labeling hyper-parameters"""

    lr_stage1 = serializers.FloatField(default=2e-6, min_value=0.0)
    lr_stage2 = serializers.FloatField(default=1e-5, min_value=0.0)
    lr_stage3 = serializers.FloatField(default=1e-6, min_value=0.0)
    weight_decay = serializers.FloatField(default=5e-4, min_value=0.0)
    batch_normal = serializers.IntegerField(default=64, min_value=1)
    batch_anomalous = serializers.IntegerField(default=64, min_value=1)
    epochs = serializers.IntegerField(default=10, min_value=1)
    patience = serializers.IntegerField(default=3, min_value=1)
    lambda_sep = serializers.FloatField(default=0.5, min_value=0.0)
    topk_fraction = serializers.FloatField(default=0.05, min_value=0.0, max_value=1.0)
    topk_k = serializers.IntegerField(required=False, allow_null=True, default=None, min_value=1)
    tau_a = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    r_hi = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    r_mid = serializers.FloatField(default=0.3, min_value=0.0, max_value=1.0)
    mc_passes = serializers.IntegerField(default=10, min_value=2)
    lambda_pse = serializers.FloatField(default=0.5, min_value=0.0, max_value=1.0)
    beta_c = serializers.FloatField(default=0.9, min_value=0.0, max_value=1.0)
    beta_ema = serializers.FloatField(default=0.999, min_value=0.0, max_value=1.0)
    stage3_normal_term = serializers.BooleanField(default=False)
    eval_batch_size = serializers.IntegerField(default=256, min_value=1)

    def validate_topk_fraction(self, value):
        if value <= 0.0:
            raise serializers.ValidationError('Must be positive')
        return value

    def validate(self, attrs):
        if attrs['r_hi'] + attrs['r_mid'] > 1.0:
            raise serializers.ValidationError({'r_mid': 'r_hi + r_mid must not exceed 1'})
        return attrs
