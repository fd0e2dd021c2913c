"""Adversarially robust meta-learning toolkit.

Meta-trainers (MAML, MAML-AD and the cross-update adversarial variant)
built on a self-contained higher-order reverse-mode autodiff engine, with
FGSM sample generation, episodic few-shot task sampling and a scenario
evaluation harness.
"""

from .adversarial import AttackConfig, epsilon_from_raw, fgsm
from .autodiff import Tensor, backward, cross_entropy, no_record
from .estimator import FewShotMetaClassifier
from .evaluation import (
    EvalReport,
    Scenario,
    build_scenario_episode,
    confidence_halfwidth,
    meta_test,
    scenario_grid,
)
from .metalearn import (
    MetaConfig,
    TrainerKind,
    adml_episode_update,
    adml_meta_grads,
    inner_adapt,
    maml_episode_update,
    mamlad_episode_update,
    meta_train,
)
from .serialize import Checkpoint, load_checkpoint, save_checkpoint
from .models import ModelSpec, ParamSet, forward, init_params, param_grads
from .tasks import (
    Episode,
    SplitSpec,
    TaskSource,
    load_image_source,
    sample_episode,
    split_classes,
    synth_blob_source,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "Checkpoint",
    "EvalReport",
    "Episode",
    "FewShotMetaClassifier",
    "MetaConfig",
    "ModelSpec",
    "ParamSet",
    "Scenario",
    "SplitSpec",
    "TaskSource",
    "Tensor",
    "TrainerKind",
    "adml_episode_update",
    "adml_meta_grads",
    "backward",
    "build_scenario_episode",
    "confidence_halfwidth",
    "cross_entropy",
    "epsilon_from_raw",
    "fgsm",
    "forward",
    "init_params",
    "inner_adapt",
    "load_checkpoint",
    "load_image_source",
    "maml_episode_update",
    "mamlad_episode_update",
    "meta_test",
    "meta_train",
    "no_record",
    "param_grads",
    "save_checkpoint",
    "sample_episode",
    "scenario_grid",
    "split_classes",
    "synth_blob_source",
    "__version__",
]
