"""Desk-scale lab for self-purifying conditional flow matching.

Trains a small velocity-field MLP with per-sample routing between the
conditional and unconditional flow-matching objectives, on synthetic labeled
data with controlled label corruption, and measures how well the routing
rule finds the corrupted labels.
"""

from .numcore import (AdamState, ModelGrads, RngStream, Tensor2, VelocityModel,
                      adam_step, forward_eval_count, mlp_forward, mlp_grad,
                      mlp_init)
from .flowmatch import (LossPair, PairedDraw, cfg_velocity, fm_loss, loss_pair,
                        make_draw, sample_ode, sample_ode_batch)
from .spfm import (PurityLedger, RoutingConfig, RoutingDecision, Verdict,
                   ledger_update, purify_batch, purify_margins, route)
from .synthdata import (BatchMixer, Dataset, NoiseSpec, Sample, gen_mixture,
                        gen_moons, inject_label_noise, load_dataset,
                        mixed_batches, mixture_means, save_dataset)
from .trainer import (Checkpoint, ConfigError, CheckpointError, MetricsRow,
                      TrainConfig, TrainResult, TrainingDiverged,
                      load_checkpoint, parse_config, save_checkpoint, train)
from .evalkit import (DetectionReport, FidelityReport, RunRecord,
                      class_consistency, detection_metrics, emit_report,
                      energy_distance)

__version__ = "0.1.0"
