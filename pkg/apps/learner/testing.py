"""Fixtures shared by the learner and theory test suites."""

from functools import cache

from apps.netcore.network import NetConfig
from apps.stream.generators import default_domains
from apps.stream.rng import RngPurpose, make_rng

from .services.pretrain_service import pretrain_maml
from .types import Hyperparams


@cache
def pretrained_theta():
    """An 8-dim, 5-way net pretrained on the default in-distribution domain."""
    net = NetConfig(input_dim=8, hidden_dims=(32,), n_classes=5)
    hp = Hyperparams(alpha1=1.0, alpha2=0.05, pretrain_tasks=8000, pretrain_meta_batch=4)
    domain = default_domains(8, 5)[0]
    theta = pretrain_maml(domain, net, hp, make_rng(0, RngPurpose.PRETRAIN))
    return net, hp, domain, theta
