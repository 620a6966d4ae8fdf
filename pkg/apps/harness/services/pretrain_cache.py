import hashlib
import json
import logging
from dataclasses import asdict

import numpy as np
from django.conf import settings
from django.core.cache import cache

from apps.learner.services.pretrain_service import pretrain_maml
from apps.learner.types import Hyperparams
from apps.netcore.network import NetConfig, ParamSet, init_params
from apps.stream.generators import DomainSpec
from apps.stream.rng import RngPurpose, make_rng

logger = logging.getLogger(__name__)

PRETRAIN_FIELDS = (
    "alpha1",
    "alpha2",
    "inner_steps_pretrain",
    "pretrain_tasks",
    "pretrain_meta_batch",
)


class PretrainCacheService:
    """Cache-backed pretrained meta models keyed by everything that determines them."""

    def __init__(self):
        self.lab_settings = getattr(settings, "LAB_SETTINGS", {})
        self.timeout = self.lab_settings.get("PRETRAIN_CACHE_TIMEOUT")

    def _get_key(
        self,
        net: NetConfig,
        domain: DomainSpec,
        hp: Hyperparams,
        seed: int,
        shots: tuple[int, int],
    ) -> str:
        """Generate the cache key for a pretraining job."""
        hp_fields = {name: getattr(hp, name) for name in PRETRAIN_FIELDS}
        canonical = json.dumps(
            [asdict(net), asdict(domain), hp_fields, seed, list(shots)],
            sort_keys=True,
            default=str,
        )
        return f"pretrain:{hashlib.sha256(canonical.encode()).hexdigest()}"

    def get_or_train(
        self,
        net: NetConfig,
        domain: DomainSpec,
        hp: Hyperparams,
        seed: int,
        n_shot: int = 5,
        n_query: int = 5,
    ) -> ParamSet:
        """Return theta_0 for ``seed``, pretraining and caching it on a miss."""
        key = self._get_key(net, domain, hp, seed, (n_shot, n_query))
        cached = cache.get(key)
        if cached is not None:
            logger.info("Pretrained model for seed %d loaded from cache", seed)
            return ParamSet(values=np.asarray(cached["values"]), shape_spec=cached["shape_spec"])

        init = init_params(net, make_rng(seed, RngPurpose.INIT))
        theta = pretrain_maml(
            domain,
            net,
            hp,
            make_rng(seed, RngPurpose.PRETRAIN),
            n_shot=n_shot,
            n_query=n_query,
            init=init,
        )
        cache.set(
            key,
            {"values": theta.values.copy(), "shape_spec": theta.shape_spec},
            timeout=self.timeout,
        )
        return theta


pretrain_cache = PretrainCacheService()
