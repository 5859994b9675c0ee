"""Cold-sampling GANs for text, at desk scale.

Autoregressive policies, behaviour samplers (temperature, nucleus and their
mixture), importance-weighted policy gradients with truncation, n-gram
discriminators and an enumeration oracle that computes exact expectations
on small vocabularies.
"""
from .discriminator import (
    DiscConfig,
    NgramDiscriminator,
    ProbeConfig,
    RecurrentDiscriminator,
    binary_reward,
    disc_score,
    disc_train,
    probe_cross_temperature,
    probe_prefix_accuracy,
)
from .metrics import bleu, oracle_nll, quality_diversity_curve, self_bleu
from .oracle import (
    BudgetExceededError,
    ExplicitData,
    MarkovData,
    default_instance,
    enumerate_sequences,
    estimator_report,
    exact_expected_reward,
    exact_policy_gradient,
)
from .sampling import (
    Mixture,
    Nucleus,
    Temperature,
    UnsupportedSampleError,
    greedy_decode,
    importance_weight,
    nucleus_set,
    parse_spec,
    sample,
    sample_batch,
    sampler_log_prob,
)
from .seqmodel import (
    EOS,
    MLEConfig,
    NeuralPolicy,
    TabularPolicy,
    Vocab,
    grad_log_prob,
    load_policy,
    mle_train,
    save_policy,
    sequence_log_prob,
)
from .trainer import (
    ReplayBuffer,
    TrainConfig,
    clipped_policy_gradient,
    policy_gradient_is,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
