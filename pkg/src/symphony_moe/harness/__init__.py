from .bench import bench_overhead, overhead_trend
from .contamination import contaminate
from .manifest import OptimizerParams, RunManifest, convergence_manifest, reference_manifest
from .tasks import SyntheticTask, TaskKind, TaskParams, generate_task, region_measures_mc
from .training import build_layer, evaluate, train

__all__ = [
    "OptimizerParams", "RunManifest", "SyntheticTask", "TaskKind", "TaskParams", "bench_overhead",
    "build_layer", "contaminate", "convergence_manifest", "evaluate", "generate_task", "overhead_trend",
    "reference_manifest", "region_measures_mc", "train",
]
