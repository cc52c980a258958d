"""Context-aware QoS tuning: Gaussian-mixture discretization, K2-learned
Bayesian networks, exhaustive context tuning, and a conferencing simulator."""

from .bayesnet import (BayesianNetworkModel, Dag, NodeSpec, TraceDataset, ch_score, infer_marginal, joint_enumerate,
                       k2_learn, learn_model, learn_parameters, markov_blanket, order_nodes, parents_of)
from .discretizer import (DiscretizationScheme, GaussianTerm, SampleSeries, build_scheme, discretize,
                          discretize_series, discretize_values, estimate_density, fit_mixture, label_to_value,
                          membership)
from .tuner import TuningRecommendation, recommend, recommend_best, tunable_parents

__version__ = "0.1.0"
