from .dci import DciScores, ImportanceMatrix, dci, importance_matrix
from .latent import interpolate, pca_directions, traverse
from .metrics import frechet, frechet_from_features, gaussian_stats, psnr, ssim
from .probe import ProbeConfig, ProbeModel, chance_accuracy, probe_eval, probe_fit
from .report import EvalReport
