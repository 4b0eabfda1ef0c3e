"""Mass-conserving advection-diffusion-reaction dynamics on graphs with a
scratch reverse-mode tape, training harnesses and study drivers."""

import os as _os

# Propagate the thread cap before any BLAS-backed import reads its env.
if _os.environ.get("ADRGNN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ADRGNN_THREADS"])


def _tune_allocator() -> None:
    # Training churns through large numpy temporaries; glibc otherwise
    # mmaps and returns each one to the OS, which dominates runtime with
    # page faults. Keeping big blocks on the heap is a pure win here.
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-4, 0)        # M_MMAP_MAX
    except (OSError, AttributeError):  # non-glibc platform
        pass


_tune_allocator()

from .autodiff import Tape, Variable, backward, cg_solve
from .graph import (EnergyReport, Graph, build_graph, dirichlet_energy,
                    erdos_renyi, laplacian_apply)
from .operators import (AdrLayerParams, AdvectionParams, DiffusionParams,
                        EdgeVelocities, ReactionParams, adr_layer, advect,
                        advection_matrix, diffuse, divergence, edge_velocities,
                        react, splitting_error_study)
from .models import (AdrGnnStatic, AdrGnnTemporal, GcnBaseline, count_parameters,
                     load_checkpoint, save_checkpoint, time_embedding)
from .data import (DatasetBundle, TemporalDataset, TransportTask,
                   generate_splits, load_graph_dataset, load_temporal_dataset,
                   make_transport_task, make_windows, normalize_series,
                   save_bundle, save_temporal)
from .training import (AdamW, Metrics, TrainConfig, TrainingDiverged,
                       ablation_study, depth_energy_study, evaluate,
                       grid_search, train_node_classification, train_temporal,
                       transport_fit)

__version__ = "0.1.0"
