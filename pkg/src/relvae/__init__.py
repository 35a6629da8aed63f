"""RelVAE: generative pretraining of relation contexts for few-shot
predicate classification, with PredDet evaluation and latent diagnostics."""

from .dataio import (BBox, ContextInput, EmbeddingTable, FewShotSplit, ObjectInstance,
                     RelationTriplet, SceneRecord, SynthConfig, build_fewshot_split,
                     generate_synthetic_dataset, iter_contexts, load_embeddings,
                     load_scenes, rare_predicate_subset, scene_image, write_embeddings,
                     write_scenes)
from .decoder import DecodedContext, Decoder, nearest_label
from .diagnostics import (LatentRecord, cross_reconstruct, export_latents,
                          perturbed_probe, project_2d)
from .encoder import (AttentionResult, CrossAttentionIdentity, Encoder, LatentCode,
                      PosteriorParams, mask_extract, reparameterize, spatial_features)
from .evaluation import (PredictionSet, RecallReport, evaluate, pair_accuracy,
                         per_predicate_recall, recall_at_k)
from .features import (BinaryMask, ConvBackbone, ImageFeatureMap,
                       PrecomputedFeatureSource, bbox_to_mask, extract_features,
                       read_feature_map, write_feature_map)
from .fewshot import (ClassifierHead, ContextFeature, HeadConfig, KNNIndex,
                      baseline_features, embed_contexts, knn1_predict, predict,
                      train_head)
from .losses import (LossBreakdown, LossWeights, bbox_heatmap_loss, cosine_loss,
                     kl_loss, mse_loss, total_loss)
from .model import ModelConfig, RelVAE, collate_contexts
from .reproduce import ReproduceConfig, run_reproduction
from .trainer import (Checkpoint, TrainConfig, build_model, load_checkpoint,
                      pretrain, save_checkpoint)

__version__ = "0.1.0"
