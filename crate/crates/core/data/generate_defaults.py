"""Regenerates the synthetic default tables shipped in this directory.

The spectra and basis curves are smooth synthetic shapes, not measured data.
Material (c1, c2) pairs are solved from each material's electron density and
mean excitation energy so that the Bragg-additivity SPR of the true
coefficients reproduces `spr_ref` exactly.
"""

import math

ENERGIES = [30.0 + 10.0 * k for k in range(12)]  # 30..140 keV

# basis electron properties (relative electron density, I-value eV)
BASIS = [(1.024, 68.7), (1.300, 120.0)]
I_WATER = 75.0
T_MEV = 175.0
ME_C2 = 0.510998950
MP_C2 = 938.27208816


def spectrum(kvp, hardening):
    w = []
    for e in ENERGIES:
        if e >= kvp:
            w.append(0.0)
            continue
        w.append((kvp - e) * math.exp(-hardening * (40.0 / e) ** 3))
    s = sum(w)
    return [x / s for x in w]


def mu1(e):
    return 0.0180 * (e / 60.0) ** -0.35 + 0.0012 * (60.0 / e) ** 3


def mu2(e):
    return 0.0190 * (e / 60.0) ** -0.35 + 0.0140 * (60.0 / e) ** 3


def beta2():
    g = MP_C2 / (T_MEV + MP_C2)
    return 1.0 - g * g


def stopping_number(i_ev):
    b2 = beta2()
    return math.log(2.0 * ME_C2 * b2 / (i_ev * 1e-6 * (1.0 - b2))) - b2


def spr(rho_e, i_ev):
    if rho_e <= 0.0:
        return 0.0
    return rho_e * stopping_number(i_ev) / stopping_number(I_WATER)


MATERIALS = [
    ("air", 0.0, 85.7),
    ("water", 1.000, 75.0),
    ("adipose", 0.951, 63.2),
    ("muscle", 1.040, 75.3),
    ("bone", 1.781, 106.4),
    ("cartilage", 1.083, 78.5),
    ("spongiosa", 1.170, 86.0),
]


def solve_c(rho_e, i_ev):
    if rho_e == 0.0:
        return 0.0, 0.0
    (r1, i1), (r2, i2) = BASIS
    b = rho_e * (math.log(i_ev) - math.log(i1)) / (math.log(i2) - math.log(i1))
    a = rho_e - b
    return a / r1, b / r2


def main():
    w90 = spectrum(90.0, 0.9)
    w140 = spectrum(140.0, 1.6)
    with open("spectra.csv", "w") as f:
        f.write("energy_keV,w90,w140\n")
        for e, a, b in zip(ENERGIES, w90, w140):
            f.write(f"{e:.1f},{a:.10f},{b:.10f}\n")
    with open("basis.csv", "w") as f:
        f.write("energy_keV,mu1_per_mm,mu2_per_mm\n")
        for e in ENERGIES:
            f.write(f"{e:.1f},{mu1(e):.10e},{mu2(e):.10e}\n")
    with open("materials.csv", "w") as f:
        f.write("name,c1,c2,rho_e_rel,I_eV,spr_ref\n")
        for name, rho, i_ev in MATERIALS:
            c1, c2 = solve_c(rho, i_ev)
            f.write(f"{name},{c1:.15f},{c2:.15f},{rho},{i_ev},{spr(rho, i_ev):.15f}\n")


if __name__ == "__main__":
    main()
