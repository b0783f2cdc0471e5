from rest_framework import serializers

from .records import LOG_SOURCES
from .services import DEFAULT_MAX_LEN


class IngestSectionSerializer(serializers.Serializer):
    """[ingest] section: where the CERT release lives and how to cut it"""

    data_dir = serializers.CharField()
    answers_dir = serializers.CharField(required=False, allow_blank=True, default='')
    answer_glob = serializers.CharField(required=False, allow_blank=True, default='')
    sources = serializers.ListField(
        child=serializers.ChoiceField(choices=LOG_SOURCES), default=list(LOG_SOURCES), allow_empty=False
    )
    max_len = serializers.IntegerField(default=DEFAULT_MAX_LEN, min_value=1)
    include_delimiters = serializers.BooleanField(default=True)
    cut_fraction = serializers.FloatField(required=False, allow_null=True, default=None)
    cut_date = serializers.DateTimeField(required=False, allow_null=True, default=None)
    val_fraction = serializers.FloatField(default=0.1, min_value=0.0, max_value=0.5)
    chunksize = serializers.IntegerField(default=500_000, min_value=1)

    def validate_cut_fraction(self, value):
        if value is not None and not 0.0 < value < 1.0:
            raise serializers.ValidationError('Must lie strictly between 0 and 1')
        return value

    def validate(self, attrs):
        if attrs.get('cut_fraction') is None and attrs.get('cut_date') is None:
            attrs['cut_fraction'] = 0.8
        elif attrs.get('cut_fraction') is not None and attrs.get('cut_date') is not None:
            raise serializers.ValidationError({'cut_date': 'Give either cut_fraction or cut_date, not both'})
        return attrs
