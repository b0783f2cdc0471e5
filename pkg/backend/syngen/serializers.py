from rest_framework import serializers


class SyngenSectionSerializer(serializers.Serializer):
    """[syngen] section: synthetic generator parameters"""

    vocab_size = serializers.IntegerField(default=50, min_value=2)
    num_patterns = serializers.IntegerField(default=5, min_value=1)
    successors = serializers.IntegerField(default=5, min_value=1)
    seq_len_min = serializers.IntegerField(default=20, min_value=1)
    seq_len_max = serializers.IntegerField(default=60, min_value=1)
    anomaly_span_min = serializers.IntegerField(default=3, min_value=1)
    anomaly_span_max = serializers.IntegerField(default=8, min_value=1)
    contamination = serializers.FloatField(default=0.1, min_value=0.0, max_value=1.0)
    anomaly_mass_limit = serializers.FloatField(default=0.1, min_value=0.0, max_value=1.0)
    num_train = serializers.IntegerField(default=2000, min_value=1)
    num_val = serializers.IntegerField(default=200, min_value=0)
    num_test = serializers.IntegerField(default=400, min_value=1)
    seed = serializers.IntegerField(default=0, min_value=0)

    def validate(self, attrs):
        if attrs['seq_len_min'] > attrs['seq_len_max']:
            raise serializers.ValidationError({'seq_len_max': 'Must not be below seq_len_min'})
        if attrs['anomaly_span_min'] > attrs['anomaly_span_max']:
            raise serializers.ValidationError({'anomaly_span_max': 'Must not be below anomaly_span_min'})
        if attrs['anomaly_span_max'] > attrs['seq_len_min']:
            raise serializers.ValidationError({
                'anomaly_span_max': 'Anomaly spans must fit inside the shortest sequence'
            })
        if attrs['successors'] > attrs['vocab_size']:
            raise serializers.ValidationError({'successors': 'Cannot exceed vocab_size'})
        return attrs
