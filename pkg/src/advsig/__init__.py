"""Recognizing which adversarial attack produced an image, from the residual
it leaves after reconstruction and from the filters it disturbs."""

from .attacks import AdversarialRecord, AttackConfig, AttackKind, attack_batch, full_grid
from .adv_dataset import DatasetManifest, generate_dataset, load_arrays, load_manifest, load_split
from .recognition import ConfusionMatrix, InputMode, train_recognizer
from .redrl import RedrlBundle, ReconstructorSpec, infer, make_bundle, train_redrl
from .saliency import SaliencyProfile, ValStats, aggregate_profiles, compute_val_stats
from .victim_zoo import TrainedVictim, TrainSchedule, VictimSpec, build_victim, train_victim

__version__ = "0.1.0"
