"""Straightest geodesics on triangle meshes: batched tracing, parallel
transport, gradients of the exponential map and geodesic Voronoi optimization."""

from .errors import DigeoError
from .mesh import Location, Mesh, SurfacePoint, TangentVector, embed, embed_many, load_mesh, project_point, save_obj
from .tracer import (BatchRequest, GeodesicTrace, TraceBatch, TraceConfig, TraceStatus, exp_map, run_batch,
                     trace, trace_batch)

__version__ = "0.1.0"

__all__ = [
    "DigeoError", "Location", "Mesh", "SurfacePoint", "TangentVector", "embed", "embed_many", "load_mesh",
    "project_point", "save_obj", "BatchRequest", "GeodesicTrace", "TraceBatch", "TraceConfig", "TraceStatus",
    "exp_map", "run_batch", "trace", "trace_batch",
]
