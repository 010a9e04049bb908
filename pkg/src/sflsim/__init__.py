"""sflsim: deterministic split federated LoRA fine-tuning simulator."""

from sflsim.costmodel import (
    DeviceProfile,
    LinkProfile,
    MemoryReport,
    StepTiming,
    memory_footprint,
    reference_devices,
)
from sflsim.datasets import DatasetSpec, dataset_hash, generate_dataset
from sflsim.experiment import (
    CellResult,
    ExperimentConfig,
    default_config,
    load_config,
    run_experiment,
    run_grid,
)
from sflsim.model_core import (
    AdapterSet,
    ForwardCache,
    FrozenStack,
    GradBundle,
    LoraAdapter,
    ModelConfig,
    backward_partial,
    forward_partial,
    init_model,
    loss_and_metrics,
    merge_delta,
    sgd_step,
)
from sflsim.sim_engine import TrainingResult, run_training

__version__ = "0.1.0"
