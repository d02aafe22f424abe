"""Non-negative CP decomposition toolkit for longitudinal behavioral sensor data.

Typical flow: :func:`featurize.tensorize` event logs into a dataset, pick a
rank with :func:`diagnostics.rank_scan` and :func:`diagnostics.select_rank`,
fit with :func:`cp.fit_restarts`, then read the components with
:mod:`analysis`.
"""

from .analysis import (
    Membership,
    MetadataTable,
    compare_groups,
    read_metadata,
    temporal_profile,
    top_individuals,
    top_variables,
    write_report,
)
from .cp import (
    CPModel,
    FitConfig,
    FitTrace,
    fit,
    fit_restarts,
    hals_sweep,
    init_random,
    normalize_columns,
    read_model,
    write_model,
)
from .diagnostics import (
    RankScan,
    SynthSpec,
    corcondia,
    factor_match_score,
    gen_synthetic,
    rank_scan,
    select_rank,
)
from .featurize import (
    EventRecord,
    FeatureSchema,
    TensorDataset,
    build_tensor,
    default_schema,
    impute_mean,
    minmax_normalize,
    tensorize,
)
from .tensor import (
    Tensor3,
    frobenius_norm,
    khatri_rao,
    mttkrp,
    reconstruct,
    refold,
    relative_error,
    unfold,
)

__version__ = "0.1.0"
