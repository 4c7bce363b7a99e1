"""Morphable-model shape codes with identity-aware regularization.

Model synthesis and projection, parameter/geometry distance analysis,
identification and prior losses, weighted class centers, a mixed-dataset
trainer, and verification/ICP evaluation, all on synthetic data.
"""

from .centers import CenterTable, center_deltas, init_centers, neutral_confidence, update_centers
from .evaluation import (AlignmentResult, CEDCurve, SimilarityTransform, VerificationPair,
                         VerificationResult, ced_curve, icp_align, make_pairs, pair_distances,
                         point_to_plane_distances, point_to_plane_rmse, umeyama_similarity,
                         verification_accuracy, vertex_normals)
from .geometry import (DistanceReport, KLStats, gaussian_prior_energy, gaussian_prior_energy_grad,
                       geometry_distance, kl_stats, kl_to_standard_normal, kl_to_standard_normal_grad,
                       param_distance, verify_proportionality)
from .losses import (AvgPoolPyramid, LossWeights, Outputs, SIRContext, albedo_regularizer,
                     center_loss, cosface_loss, landmark_loss, loss_terms, make_anchors,
                     param_regularizer, perceptual_loss, pixel_loss, sample_kind, sir_batch_loss,
                     sir_loss, total_loss)
from .model import (GimbalLockWarning, Mesh, MorphableModel, OrthonormalityWarning, Pose,
                    euler_to_matrix, euler_to_quaternion, extract_euler, load_model, project,
                    project_landmarks, quaternion_to_matrix, save_model, synthesize,
                    synthesize_vector, transform_to_camera)
from .objio import format_obj, read_obj, write_obj
from .synthetic import (RankDeficiencyWarning, SyntheticDataset, SyntheticSpec,
                        build_model_via_pca, build_synthetic_model, generate_identities,
                        load_dataset, make_face_like_meshes, save_dataset)
from .trainer import (DivergenceError, LinearRegressor, MixedDataset, StageConfig, TrainConfig,
                      TrainResult, TrainSample, desk_config, draw_batch, gradient_check,
                      sampling_probability, train, two_stage_config)

__version__ = "0.1.0"
