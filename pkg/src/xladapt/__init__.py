"""Adapter-based cross-lingual transfer on a frozen mini-transformer.

Subpackages: ``autodiff`` (tape-based reverse-mode core), ``params``
(partitioned parameter store and checkpoints), ``backbone`` (CTC-attention
transformer), ``adapters`` (residual bottleneck adapters), ``metalearn``
(MAML adapter pre-training), ``fusion`` (attention fusion over language
adapters), ``synthtasks`` (synthetic language generator), ``harness``
(experiment runner) and ``cli``.
"""

from .autodiff import Tape, Tensor, grad, grad_check, no_grad
from .backbone import Backbone, BackboneConfig, ctc_loss, token_error_rate
from .harness import ExperimentConfig, run_strategy, sweep, time_report
from .params import ParamSet

__all__ = [
    "Tape", "Tensor", "grad", "grad_check", "no_grad",
    "Backbone", "BackboneConfig", "ctc_loss", "token_error_rate",
    "ExperimentConfig", "run_strategy", "sweep", "time_report", "ParamSet",
]
