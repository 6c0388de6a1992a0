"""Dynamic integration of services at runtime.

Modules:

* ``service_model``: descriptors, validation and a per-node registry.
* ``matching``: API and semantic classification of two services.
* ``combining``: simple composition, weaving and optimization.
* ``remoting``: a simulated network with stubs, skeletons and caches.
* ``integserv``: the integration service and the ``Integrable`` facade.
"""

from .service_model import Registry, ServiceDescriptor, load_descriptor, validate
from .matching import ConceptTable, classify
from .combining import compose_simple, weave, optimize, materialize
from .remoting import Network
from .integserv import IntegServ, Integrable

__version__ = "0.1.0"
