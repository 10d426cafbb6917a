"""Slice-based attention neural operator with a self-contained autodiff core,
a synthetic Darcy-flow pipeline, training, metrics and a CLI."""

from .attention import (AttentionParams, AttnTrace, attention_kl_from_uniform,
                        compute_slice_weights, compute_slice_weights_stencil,
                        deslice, physics_attention, regular_square_slices,
                        slice_encode, token_attention)
from .darcy import (Dataset, FieldStats, MeshSample, build_dataset,
                    generate_permeability, load_dataset, resample_mesh,
                    save_dataset, solve_darcy)
from .errors import (ConfigError, ContractError, DataError, GeometryError,
                     NumericError, ShapeError)
from .metrics import (EvalReport, SurfacePatchSet, evaluate, force_coefficient,
                      relative_l2, spearman_rho)
from .model import (ModelConfig, ParamStore, embed_inputs, forward, init_params,
                    load_checkpoint, param_specs, save_checkpoint,
                    transformer_layer)
from .tensor import Graph, GradCheckReport, Tensor, grad_check
from .training import (AdamWState, TrainConfig, TrainHistory, adamw_step,
                       gradient_reg_loss, relative_l2_loss, train)

__version__ = "0.1.0"
