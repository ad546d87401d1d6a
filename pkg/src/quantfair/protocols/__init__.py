"""Benchmark protocols: splitting and sampling engines, the protocol runner, aggregation."""

from .runner import (PROTOCOLS, DecouplingRecord, ProtocolSpec, run_decoupling, run_protocol,
                     size_grid)
from .sampling import (flip_to_target, sample_at_prevalence, sample_joint_ys, sample_uniform,
                       stratified_three_split)
from .stats import AggregateRow, aggregate, box_stats, paired_ttest, significance_tier
