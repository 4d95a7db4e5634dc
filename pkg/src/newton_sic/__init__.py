"""Newton's problem of minimal resistance with the single impact condition.

Lower bound phi(Omega, M), elementary mirror/valley pairs, the Besicovitch-type families that
cover a domain with small valleys, the composite surface u = min u_i, an exact billiard tracer
and the body with the double impact condition.
"""
from .domain import ConvexDomain, boundary_distance, lattice_cover, make_domain
from .elementary import (ElementaryFunction, ElementaryPair, PairArrays, focal_parameter, lemma1_envelope,
                         make_elementary_pair, sic_sample_check)
from .hierarchy import (Tri, build_first_order_family, build_second_order_family, double_triangle,
                        family_report, run_doubling, scale_family_to_circle)
from .assembly import (CompositeSurface, build_composite_surface, composite_from_pairs, evaluate_surface,
                       surface_metrics, verify_composite)
from .billiard import Scene, batch_trace, graph_scene, reflect, trace_ray
from .resistance import (ResistanceReport, asymptotics, phi_lower_bound, reference_table, resistance_analytic,
                         resistance_billiard)
from .dic_body import DicBody, InnerParams, build_dic_body, dic_verify

__version__ = "0.1.0"
