"""Two-stage monaural source separation: a time-frequency masking
pre-separation network trained with a joint embedding / permutation-invariant
/ discriminative objective, followed by a waveform-domain post-filter that
fuses the mixture and pre-separated streams through dot-product attention and
a dilated temporal conv-net mask estimator.
"""

from .dsp import (
    ComplexSpectrogram,
    FeatureStats,
    MixSpec,
    Segment,
    Waveform,
    istft,
    masked_reconstruct,
    mix_sources,
    normalize_magnitude,
    segment_waveform,
    stft,
    synth_toy_source,
)
from .errors import InvalidInput, NumericalError, Unsupported
from .losses import (
    LossWeights,
    PermutationOutcome,
    dc_loss,
    dl_loss,
    joint_loss,
    si_snr,
    si_snr_pit_loss,
    upit_psm_loss,
)
from .masks import ideal_ibm, ideal_irm, ideal_mask_stack, ideal_psm, membership_from_sources
from .prestage import PreStageConfig, PreStageModel, prestage_separate
from .postfilter import AttentionFusion, E2epfConfig, PostFilterModel, attention_fuse, e2epf_forward
from .evaluation import BssEval, EvalReport, bss_eval, oracle_eval, score_utterance, si_snr_improvement
from .training import TrainRecipe, train_e2epf, train_prestage

__version__ = "0.1.0"
