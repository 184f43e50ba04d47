"""Select plans over blocked parameters and client key strategies."""

from .params import BlockedParams, BlockSpec, Layout
from .plans import (
    BlockSelect,
    CallablePlan,
    FlattenedPlan,
    FusedPlan,
    MergedPlan,
    NeuronSelect,
    RowSelect,
    SelectPlan,
    WholeModelPlan,
    count_scalars,
    flatten_slice,
    flatten_multikey_plan,
    fuse_broadcast_into_select,
    merge_select_plans,
    phi_scatter,
    psi_slice,
)
from .strategies import (
    KeyStrategy,
    keys_mixed_alpha,
    keys_random_from_local,
    keys_random_top,
    keys_top_m,
    keys_uniform_random,
    mixed_counts,
)
