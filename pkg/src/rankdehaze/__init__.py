"""Single-image dehazing with rank-augmented CNN features.

A small CNN (with a parameter-free layer that sorts each feature map) turns
20x20 patches into haze-relevant features; a random forest regresses each
pixel's transmission from them; the scattering model then recovers the clear
image, refined by a guided filter and an adaptive exposure boost.
"""

__version__ = "0.1.0"

from .nn import RankCorrespondence, TrainConfig, rank_backward, rank_forward
from .network import (BinLabel, NetworkModel, bin_label, build_network,
                      classify, extract_features, load_model, save_model, train)
from .synth import (PatchDataset, PatchSample, build_dataset,
                    make_procedural_images, read_dataset,
                    sample_clear_patches, synthesize_hazy, write_dataset)
from .forest import (ForestConfig, ForestModel, feature_importance,
                     fit_baseline, fit_forest, load_forest, predict, save_forest)
from .pipeline import (DehazeOptions, DehazeResult, dark_channel, dehaze,
                       estimate_atmospheric_light, exposure_adjust,
                       guided_filter, recover, transmission_map, white_balance)
from .evalbench import (EvalCase, EvalReport, benchmark_methods, l1_image,
                        l1_transmission, make_eval_case, run_ablation)

__all__ = [name for name in dir() if not name.startswith("_")]
