"""colcombine: pack sparse pointwise-CNN filter matrices by column combining
and validate the result on a cycle-accounted bit-serial systolic-array
simulator (tiling, cross-layer pipelining, energy accounting)."""

from .energy import EnergyParams, energy_efficiency_ratio, mac_counts
from .exceptions import (ColCombineError, ConfigError, DataFormatError,
                         DivergenceError, GroupingError, IntegrityError,
                         NetworkError, PipelineError, SimulationError,
                         StagnationError)
from .matrix import (ColumnGrouping, LayerDef, NetworkDef, PackedFilterMatrix,
                     PackingParams, QuantParams, SparseFilterMatrix,
                     count_conflicts, density, require_valid_network,
                     validate_network)
from .packing import (ColumnCombiner, GroupingTrace, RowPermutation,
                      group_columns, group_prune, pack, packing_efficiency,
                      permute_network_rows, row_permutation)
from .pipeline import (PipelineSchedule, latency_report, schedule_pipeline,
                       schedule_sequential)
from .simulator import (ArrayConfig, CellConfig, SimTrace, TilePlan,
                        bitserial_mac, relu_quant, run_layer, run_network,
                        shift_apply, simulate_array, tile_plan)
from .training import (ColumnCombiningClassifier, Dataset, PruneMask,
                       ShiftNet, TrainConfig, dataset_fraction,
                       iterative_train, load_idx, magnitude_prune,
                       make_synthetic_dataset, pack_network, quantize_network,
                       sgd_retrain, split_dataset)

__version__ = "0.1.0"
