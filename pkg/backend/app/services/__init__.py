# Model, simulation and analysis services
from app.services.lattice_model import Configuration, Event, Torus, VelocityModel, load_model
from app.services.local_functions import LocalFunction
from app.services.dual_algebra import SetFunction, SymmetricTupleFunction
from app.services.hierarchy_service import HierarchyService, get_hierarchy_service
from app.services.export_service import ExportService

__all__ = [
    "Configuration",
    "Event",
    "Torus",
    "VelocityModel",
    "load_model",
    "LocalFunction",
    "SetFunction",
    "SymmetricTupleFunction",
    "HierarchyService",
    "get_hierarchy_service",
    "ExportService",
]
