"""Few-shot open-set embedding adaptation for household speaker identification."""
from ._kernels import BACKEND
from .adapter import AdapterParams, adapt_backward, adapt_set, load_model, save_model
from .bank import GenParams, SpeakerBank, generate_bank, load_bank, save_bank, split_bank
from .embedcore import DomainError, PrototypeSet, ScoringConfig, classify, scaled_cosine
from .episodes import Episode, EpisodeConfig, sample_episode, support_prototypes
from .evaluate import curve_and_ieer, ieer_by_size, score_household, summarize_runs
from .households import HouseholdConfig, simulate_household, simulate_runs
from .losses import LossConfig, episode_loss, feat_loss, loss_gradients, open_set_loss, openfeat_loss
from .trainer import TrainConfig, train

__version__ = "0.1.0"
