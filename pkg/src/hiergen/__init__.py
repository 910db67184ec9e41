"""Disentangled structure/geometry generative model for part-based 3D shapes."""

from .tensor import (AdamState, GaussianParams, Tensor, adam_step,
                     gaussian_kl, reparameterize)
from .mesh import (OBB, AcapFeature, Mesh, acap_extract, acap_reconstruct,
                   compute_obb, make_box_template, mesh_graph_conv,
                   register_box_to_part)
from .hierarchy import (PartHierarchy, RelationEdge, SemanticTemplate,
                        StructureNode, GeometryNode, detect_relations,
                        load_hierarchy, save_hierarchy, validate)
from .part_vae import PartVae
from .struct_vae import StructVae
from .geom_vae import GeomVae
from .trainer import (LatentPair, ObbProxy, ShapeModel, TrainConfig,
                      full_decode, full_encode, interpolate, load_model,
                      match_children, recombine, reconstruct, sample_shapes,
                      save_model, total_loss, train)
from .synth import (ChairGeomParams, ChairStructureSpec, SynthConfig,
                    build_chair, enumerate_structures, generate_dataset,
                    sample_geometry_params)
from .metrics import (chamfer, coverage_quality, emd, frechet_distance,
                      sample_surface, tree_edit_distance)
from .postproc import PostprocConfig, optimize_centers

__all__ = [name for name in dir() if not name.startswith("_")]
