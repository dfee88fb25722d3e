from .fem import FEValues, PointLocator, interpolate_p2, l2_norm
from .mesh import (Mesh, MeshError, MovingMesh, TanglingError, build_reference_mesh,
                   rectangle_mesh, transport_mesh)
from .piola import PiolaMap, piola_apply
from .state import FlowState, spacetime_integrate
from .weakform import LinearSystem, SingularSystemError, assemble_weak_form

__all__ = [
    "FEValues", "PointLocator", "interpolate_p2", "l2_norm", "Mesh", "MeshError",
    "MovingMesh", "TanglingError", "build_reference_mesh", "rectangle_mesh", "transport_mesh",
    "PiolaMap", "piola_apply", "FlowState", "spacetime_integrate", "LinearSystem",
    "SingularSystemError", "assemble_weak_form",
]
