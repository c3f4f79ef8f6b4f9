from django.conf import settings
from rest_framework import serializers

LABEL_CHOICES = ('entailment', 'contradiction', 'neutral')
UNLABELED = '-'


class CorpusRecordSerializer(serializers.Serializer):
    """One JSONL line of an SNLI-format corpus, optionally carrying generation fields."""
    gold_label = serializers.ChoiceField(choices=LABEL_CHOICES + (UNLABELED,))
    sentence1 = serializers.CharField(allow_blank=True, trim_whitespace=False)
    sentence2 = serializers.CharField(allow_blank=True, trim_whitespace=False)
    origin_index = serializers.IntegerField(required=False, min_value=0)
    gen_logprob = serializers.FloatField(required=False)
    judge_prob = serializers.FloatField(required=False, min_value=0.0, max_value=1.0)


def _nligen(key):
    return settings.NLIGEN[key]


class TrainConfigSerializer(serializers.Serializer):
    hidden_dim = serializers.IntegerField(min_value=1, default=lambda: _nligen('HIDDEN_DIM'))
    latent_dim = serializers.IntegerField(min_value=1, default=lambda: _nligen('LATENT_DIM'))
    embedding_dim = serializers.IntegerField(min_value=1, default=lambda: _nligen('EMBEDDING_DIM'))
    batch_size = serializers.IntegerField(min_value=1, default=lambda: _nligen('BATCH_SIZE'))
    generator_epochs = serializers.IntegerField(min_value=1, default=lambda: _nligen('GENERATOR_EPOCHS'))
    classifier_max_epochs = serializers.IntegerField(
        min_value=1, default=lambda: _nligen('CLASSIFIER_MAX_EPOCHS'))
    discriminator_epochs = serializers.IntegerField(
        min_value=1, default=lambda: _nligen('DISCRIMINATOR_EPOCHS'))
    patience = serializers.IntegerField(min_value=1, default=lambda: _nligen('PATIENCE'))
    learning_rate = serializers.FloatField(min_value=0.0, default=lambda: _nligen('LEARNING_RATE'))
    clip_norm = serializers.FloatField(min_value=0.0, default=lambda: _nligen('CLIP_NORM'))
    latent_init_std = serializers.FloatField(min_value=0.0, default=lambda: _nligen('LATENT_INIT_STD'))
    seed = serializers.IntegerField(default=lambda: _nligen('SEED'))

    def validate_learning_rate(self, value):
        if value <= 0:
            raise serializers.ValidationError("learning_rate must be positive")
        return value


class FilterConfigSerializer(serializers.Serializer):
    thresholds = serializers.ListField(
        child=serializers.FloatField(min_value=0.0),
        allow_empty=False,
        default=lambda: list(_nligen('THRESHOLDS')),
    )
    merge_threshold = serializers.FloatField(min_value=0.0, default=lambda: _nligen('MERGE_THRESHOLD'))
    judge = serializers.CharField(required=False, allow_blank=True, allow_null=True, default=None)
    # Abort when a filtered set cannot fill the target size; otherwise shrink the target.
    strict_size = serializers.BooleanField(default=True)

    def validate_thresholds(self, value):
        for threshold in value:
            if not 0.0 <= threshold < 1.0:
                raise serializers.ValidationError(f"threshold {threshold} outside [0, 1)")
        return sorted(set(value))

    def validate_merge_threshold(self, value):
        if not 0.0 <= value < 1.0:
            raise serializers.ValidationError(f"threshold {value} outside [0, 1)")
        return value


class GenerationConfigSerializer(serializers.Serializer):
    beam_size = serializers.IntegerField(min_value=1, default=lambda: _nligen('BEAM_SIZE'))
    max_len = serializers.IntegerField(min_value=1, default=lambda: _nligen('HYPOTHESIS_LEN'))
    oversample = serializers.FloatField(min_value=1.0, default=lambda: _nligen('OVERSAMPLE'))
    scalar_sigma = serializers.BooleanField(default=False)
    workers = serializers.IntegerField(min_value=1, default=lambda: _nligen('WORKERS'))
    seed = serializers.IntegerField(default=lambda: _nligen('SEED'))


class RunConfigSerializer(serializers.Serializer):
    """Everything a pipeline run needs; ``config.json`` of a run directory round-trips through it."""
    kind = serializers.ChoiceField(choices=('att-embed', 'base-embed', 'encdec', 'vae-encdec'),
                                   default='att-embed')
    train = TrainConfigSerializer(required=False)
    filter = FilterConfigSerializer(required=False)
    generation = GenerationConfigSerializer(required=False)
    premise_len = serializers.IntegerField(min_value=1, default=lambda: _nligen('PREMISE_LEN'))
    hypothesis_len = serializers.IntegerField(min_value=1, default=lambda: _nligen('HYPOTHESIS_LEN'))
    unknown_embedding_std = serializers.FloatField(
        min_value=0.0, default=lambda: _nligen('UNKNOWN_EMBEDDING_STD'))
    embeddings = serializers.CharField(required=False, allow_blank=True, allow_null=True, default=None)
    checkpoint_dtype = serializers.ChoiceField(choices=('f32', 'f64'),
                                               default=lambda: _nligen('CHECKPOINT_DTYPE'))
    latent_dims = serializers.ListField(child=serializers.IntegerField(min_value=1),
                                        default=lambda: [2, 4, 8, 16, 32])
