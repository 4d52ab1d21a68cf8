"""Gradient-free black-box adversarial attacks with a genetic algorithm.

The package is organised around five pieces:

* :mod:`evoattack.tensors`  -- image / noise-grid arithmetic (resize, projections, norms)
* :mod:`evoattack.model`    -- scores-only classifier, GNW weight files, query metering
* :mod:`evoattack.engine`   -- the genetic attack loop
* :mod:`evoattack.defenses` -- input-transformation defenses and the randomized-fitness wrapper
* :mod:`evoattack.harness`  -- dataset ingestion, batch experiments, reports

plus a FastAPI service (:mod:`evoattack.service`) and a thin CLI client
(:mod:`evoattack.cli`) in front of it.
"""

__version__ = "0.1.0"

from evoattack.engine import AttackConfig, AttackResult, run_attack
from evoattack.model import BlackBox, QueryMeter, load_model
from evoattack.defenses import DefendedModel, DefenseSpec

__all__ = [
    "AttackConfig",
    "AttackResult",
    "BlackBox",
    "DefendedModel",
    "DefenseSpec",
    "QueryMeter",
    "load_model",
    "run_attack",
    "__version__",
]
