"""Context-encoder inpainting for chest X-ray patches.

Train a generator to reconstruct the blanked central region of grayscale
patches under a joint L2 + adversarial objective, then highlight anomalies
as the pixel-wise difference between a scan and its healthy reconstruction.
"""

from .tensor import ContractError, Rng, Tensor, tensor, zeros, full
from .layers import BatchNormState, ConvParams, LayerGrads
from .loss import LossWeights, MaskSpec
from .models import (Checkpoint, ModelConfig, build_discriminator,
                     build_generator, generate, load_checkpoint,
                     save_checkpoint)
from .optim import (AdamState, BalanceReport, Trainer, TrainSchedule,
                    TrainState, adam_step, balance_report)
from .metrics import MetricsReport, anomaly_energy, diff_map, mse, psnr, ssim

__version__ = "0.1.0"
