"""All-layer feature selection + balanced last-layer retraining for spurious
correlations, with DFR and Affine-DFR baselines on small numpy MLPs."""

from .config import RunConfig, parse_config, resolve_config
from .datasets import GroupedDataset, SpuriousGenSpec, balanced_subset, generate, group_stats, load_csv, save_csv
from .nn import MlpModel, SgdConfig, TrainableMask, backward, build_mlp, forward_with_taps, grad_check, sgd_step
from .pipeline import (GroupMetrics, H2TModel, affine_dfr, dfr_retrain, erm_finetune, evaluate_groups,
                       h2t_dfr_run, run)
from .selection import (apply_mask, build_bank, layer_histogram, pool_layer, relevance_scores,
                        select_top_fraction, train_group_lasso_head)

__version__ = "0.1.0"
