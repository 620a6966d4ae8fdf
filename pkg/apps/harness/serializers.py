import math
from collections.abc import Mapping

from django.conf import settings
from rest_framework import serializers

from apps.detect.detectors import ENERGY_SIGN_ALIASES, EnergySign
from apps.learner.types import Hyperparams, LearnerMode
from apps.netcore.exceptions import ConfigurationError
from apps.netcore.network import Activation, NetConfig
from apps.stream.generators import DomainSpec, StreamConfig, default_domains
from apps.theory.types import TheoryConfig

from .config import AUTO, DetectorSpec, ExperimentConfig


def lab_setting(key, default):
    return lambda: getattr(settings, "LAB_SETTINGS", {}).get(key, default)


def build(factory, **attrs):
    """Construct a config object, turning invariant violations into field errors."""
    try:
        return factory(**attrs)
    except ConfigurationError as err:
        raise serializers.ValidationError(str(err)) from err


class StrictSerializer(serializers.Serializer):
    """Rejects keys that are not declared fields."""

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)


class AutoFloatField(serializers.FloatField):
    """A number, or "auto" (stored as None)."""

    def to_internal_value(self, data):
        if data == AUTO:
            return None
        return super().to_internal_value(data)

    def to_representation(self, value):
        return AUTO if value is None else super().to_representation(value)


class NetSerializer(StrictSerializer):
    input_dim = serializers.IntegerField(min_value=1)
    hidden_dims = serializers.ListField(
        child=serializers.IntegerField(min_value=1), default=lambda: [32]
    )
    n_classes = serializers.IntegerField(min_value=2)
    activation = serializers.ChoiceField(choices=[a.value for a in Activation], default="relu")

    def validate(self, attrs):
        return build(NetConfig, **attrs)


class DomainSerializer(StrictSerializer):
    domain_id = serializers.IntegerField(min_value=0)
    prototype_center = serializers.ListField(child=serializers.FloatField(), min_length=1)
    prototype_radius = serializers.FloatField()
    sample_noise_sigma = serializers.FloatField()
    n_ways = serializers.IntegerField()
    is_pretrain = serializers.BooleanField(default=False)
    name = serializers.CharField(default="", allow_blank=True)

    def validate(self, attrs):
        return build(DomainSpec, **attrs)


class StreamSerializer(StrictSerializer):
    p_stay = serializers.FloatField()
    eta_ind = serializers.FloatField(default=0.5)
    n_shot = serializers.IntegerField(default=5)
    n_query = serializers.IntegerField(default=5)
    seed = serializers.IntegerField(min_value=0, default=0)
    domains = DomainSerializer(many=True, required=False)


class HyperparamsSerializer(StrictSerializer):
    alpha1 = serializers.FloatField(required=False)
    alpha2 = serializers.FloatField(required=False)
    inner_steps_pretrain = serializers.IntegerField(required=False)
    pretrain_tasks = serializers.IntegerField(required=False)
    pretrain_meta_batch = serializers.IntegerField(required=False)
    cmaml_gamma = serializers.FloatField(required=False)

    def validate(self, attrs):
        return build(Hyperparams, **attrs)


class DetectorSerializer(StrictSerializer):
    ell = AutoFloatField(default=None)
    tau = AutoFloatField(default=None)
    delta = serializers.FloatField(default=lab_setting("DEFAULT_DELTA", 1.0))
    energy_sign = serializers.ChoiceField(
        choices=[*(s.value for s in EnergySign), *ENERGY_SIGN_ALIASES],
        default=lab_setting("ENERGY_SIGN", "negated"),
    )
    coverage = serializers.FloatField(default=lab_setting("CALIBRATION_COVERAGE", 0.95))

    def validate(self, attrs):
        return build(DetectorSpec, **attrs)


class TheorySerializer(StrictSerializer):
    M_clip = serializers.FloatField(required=False)
    ell_m = serializers.FloatField(required=False)
    ell_p = serializers.FloatField(required=False)
    c_support = serializers.FloatField(required=False, allow_null=True)
    rho_target = serializers.FloatField(required=False)
    comparator_tol = serializers.FloatField(required=False)
    comparator_lr = serializers.FloatField(required=False)
    comparator_max_steps = serializers.IntegerField(required=False)
    calibration_episodes = serializers.IntegerField(required=False)
    eval_samples = serializers.IntegerField(required=False)


class ExperimentSerializer(StrictSerializer):
    net = NetSerializer()
    stream = StreamSerializer()
    hp = HyperparamsSerializer(required=False)
    detector = serializers.JSONField(required=False, default=AUTO)
    modes = serializers.ListField(
        child=serializers.ChoiceField(choices=[m.value for m in LearnerMode]),
        min_length=1,
        default=lambda: [LearnerMode.LEEDS.value],
    )
    n_steps = serializers.IntegerField(min_value=1)
    n_seeds = serializers.IntegerField(min_value=1, default=1)
    output_dir = serializers.CharField(default=lab_setting("OUTPUT_DIR", "runs"))
    oracle = serializers.BooleanField(default=False)
    theory = TheorySerializer(required=False)

    def validate_detector(self, value):
        if value == AUTO:
            value = {}
        if not isinstance(value, Mapping):
            raise serializers.ValidationError('Expected "auto" or an object.')
        detector = DetectorSerializer(data=value)
        if not detector.is_valid():
            raise serializers.ValidationError(detector.errors)
        return detector.validated_data

    def validate_modes(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Modes must not repeat.")
        return value

    def validate(self, attrs):
        net = attrs["net"]
        stream = dict(attrs["stream"])
        try:
            domains = stream.pop("domains", None) or default_domains(net.input_dim, net.n_classes)
            scfg = StreamConfig(domains=tuple(domains), **stream)
        except ConfigurationError as err:
            raise serializers.ValidationError({"stream": [str(err)]}) from err

        theory = None
        if "theory" in attrs:
            levels = {"M_clip": 2 * math.log(net.n_classes), **attrs["theory"]}
            try:
                theory = TheoryConfig(**levels)
            except ConfigurationError as err:
                raise serializers.ValidationError({"theory": [str(err)]}) from err

        return build(
            ExperimentConfig,
            net=net,
            stream=scfg,
            hp=attrs.get("hp", Hyperparams()),
            detector=attrs["detector"],
            modes=tuple(attrs["modes"]),
            n_steps=attrs["n_steps"],
            n_seeds=attrs["n_seeds"],
            output_dir=attrs["output_dir"],
            oracle=attrs["oracle"],
            theory=theory,
        )
