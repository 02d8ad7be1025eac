"""MIL-PF: two-stream multiple-instance head on precomputed embeddings."""

from .embedset import (
    EmbedBag,
    EmbedDataset,
    SynthConfig,
    ViewRecord,
    read_dataset,
    split_patients,
    synth_dataset,
    synth_dataset_with_truth,
    write_dataset,
)
from .milhead import (
    AggConfig,
    HeadParams,
    StreamParams,
    aggregate,
    bce_loss,
    count_params,
    forward,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)
from .backprop import fd_grad, loss_and_grad
from .tilegeom import GridSpec, TileGeom, coverage_count, tile_grid
from .trainer import RunResult, TrainConfig, evaluate, multi_run, train_once, train_sil
from .metrics import EvalReport, ScoredBox, auc, balanced_accuracy, iou, map_at_iou, spec_at_sens
from .explain import Heatmap, attention_heatmap, boxes_from_heatmap

__version__ = "0.1.0"
