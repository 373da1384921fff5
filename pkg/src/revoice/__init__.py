"""Universal speech enhancement: a conditioning network steering a
score-diffusion sampler, trained with score matching plus adversarial losses
over a dynamically degraded corpus, with LoRA fine-tuning for phoneme
fidelity."""

from .audio_core import (
    AudioBuffer,
    FilterKernel,
    SpectralConfig,
    design_lowpass_fir,
    log_spectral_distance,
    mel_spectrogram,
    read_wav,
    resample_by_factor,
    stft,
    istft,
    write_wav,
)
from .degradation import (
    AssetStore,
    DegradationConfig,
    DegradationRecipe,
    degrade,
    item_seed,
    mix_at_snr,
    sample_recipe,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    enhance,
    langevin_sample,
    precondition_coeffs,
    sampler_params,
    score_matching_loss,
    sigma_at,
)
from .errors import (
    AssetResolutionError,
    CheckpointMismatchError,
    ConfigError,
    FilterDesignError,
    InvalidAssetError,
    InvalidInputError,
    InvalidRecipeError,
    NumericDivergenceError,
    RevoiceError,
)
from .networks import ArchitectureConfig, ConditioningFeatures, EnhancementModel, build_model
from .trainer import (
    EMAState,
    ExperimentPreset,
    TrainConfig,
    Trainer,
    checkpoint_load,
    checkpoint_save,
    desk_preset,
    ema_update,
    load_enhancement_model,
    lr_at_step,
    paper_preset,
)
from .lora import (
    LoRAAdapter,
    TemplatePhonemePredictor,
    ctc_log_likelihood,
    ctc_phoneme_loss,
    finetune_step,
    greedy_decode,
    inject_lora,
    merge_lora,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
