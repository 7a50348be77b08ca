"""orbitmoe: mixture-of-experts vision transformer whose experts are learned
butterfly rotations of one shared ternary-quantized weight substrate, with
the matching analytical memory/compression/energy model.

Subpackages follow the pipeline bottom-up: ``tensor_core`` (numpy-backed
primitives with manual backward passes), ``butterfly`` (Givens-stage
rotations), ``ternary`` (AbsMean quantization + packing), ``moe`` (routing
and the three FFN variants), ``vit`` (the full model and training loop),
``memory_model`` (expert-memory accounting), ``data`` (dataset ingestion)
and ``cli`` (batch experiment entry points).
"""

from .butterfly import (ButterflyAngles, butterfly_backward,
                        butterfly_forward, materialize, next_pow2,
                        perfect_shuffle)
from .data import (DataError, ImageDataset, SyntheticSpec, gen_synthetic,
                   load_cifar100)
from .memory_model import (ArchSpec, DeviceFit, DeviceProfile, MemoryReport,
                           asymptotic_ratio, butterfly_bytes,
                           census_consistency, compression_ratio, dram_energy,
                           load_device_profiles, max_experts_fit,
                           memory_report, report_rows, standard_moe_bytes)
from .moe import (DenseFFNLayer, OrbitalMoELayer, Param, RoutingStats,
                  StandardMoELayer, effective_expert_matrix,
                  expert_cosine_similarity, gate_topk, init_orbital,
                  load_balance_loss, spatial_smoothness_loss)
from .tensor_core import Rng, ShapeError, gaussian, gelu, layer_norm, matmul, \
    softmax, softmax_cross_entropy
from .ternary import (FormatError, TernaryMatrix, absmean_quantize, pack,
                      ste_backward, ternary_apply, unpack)
from .vit import (CheckpointError, DivergenceError, TrainSchedule, ViTConfig,
                  ViTModel, build_model, evaluate, load_checkpoint,
                  parameter_census, save_checkpoint, total_loss, train)

__version__ = "0.1.0"
