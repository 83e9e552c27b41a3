"""Unit conversions between SI internals and traffic-engineering reporting units.

Everything inside the package runs in SI (m, s, veh/m, veh/s). km/h, veh/km
and veh/h exist only at the config and report boundaries.
"""

MPS_PER_KMH = 1000.0 / 3600.0
KMH_PER_MPS = 3.6

VEH_PER_M_PER_VEH_PER_KM = 1e-3
VEH_PER_KM_PER_VEH_PER_M = 1e3

VEH_PER_S_PER_VEH_PER_H = 1.0 / 3600.0
VEH_PER_H_PER_VEH_PER_S = 3600.0


def kmh_to_mps(v: float) -> float:
    return v * MPS_PER_KMH


def mps_to_kmh(v: float) -> float:
    return v * KMH_PER_MPS


def vehkm_to_vehm(rho: float) -> float:
    return rho * VEH_PER_M_PER_VEH_PER_KM


def vehm_to_vehkm(rho: float) -> float:
    return rho * VEH_PER_KM_PER_VEH_PER_M


def vehh_to_vehs(q: float) -> float:
    return q * VEH_PER_S_PER_VEH_PER_H


def vehs_to_vehh(q: float) -> float:
    return q * VEH_PER_H_PER_VEH_PER_S
