"""Regenerate src/rxnlm/data/reactions.txt, the bundled reaction fixture.

Reactions are assembled from hand-written fragments: an electrophile
(host fragment with a leaving group at the ``*`` site) couples with a
nucleophile (guest fragment whose first atom attacks). Host fragments use
ring labels 1-4, guests use 5-9 and %1x, so substitution never clashes.
Output is deterministic for a given seed.
"""
import argparse
import random
from pathlib import Path

HOSTS = [
    "CC(=O)*", "c1ccc(*)cc1", "c1ccc(C*)cc1", "CCOC(=O)c1ccc(*)cc1", "O=C(*)c1ccccc1",
    "Cc1ccc(*)cc1", "COc1ccc(C(=O)*)cc1", "N#Cc1ccc(*)cc1", "O=[N+]([O-])c1ccc(*)cc1",
    "CC(C)(C)OC(=O)N1CCC(*)CC1", "c1ccc2c(c1)cccc2*", "Clc1ccc(*)cc1", "FC(F)(F)c1ccc(*)cc1",
    "CCCC*", "CC(C)C*", "O=C(*)C1CC1", "c1cnc(*)nc1", "c1ccc(*)nc1", "Cc1cc(*)no1",
    "c1csc(*)c1", "O=C(*)c1ccco1", "CS(=O)(=O)*", "Cc1ccc(S(=O)(=O)*)cc1", "C=CC*",
    "C#CC*", "O=C(OCc1ccccc1)*", "CC(C)(C)C(=O)*", "COC(=O)C*", "CC1(C)OB(*)OC1(C)C",
    "[2H]C([2H])([2H])*", "C[C@@H](*)c1ccccc1", "O=C(*)/C=C/c1ccccc1", "c1ccc2[nH]ccc2c1*",
    "Brc1cccc(*)c1", "CC(=O)c1ccc(*)cc1", "O=C1CCC(*)CC1", "c1ccc(-c2ccccc2*)cc1",
    "CC[Si](CC)(CC)*", "O=S(=O)(*)C(F)(F)F", "CN(C)C(=O)c1ccc(*)cc1",
]
LEAVING = ["Cl", "Br", "I", "O", "OS(=O)(=O)C(F)(F)F"]
GUESTS = [
    "N5CCOCC5", "N5CCCC5", "N5CCN(C)CC5", "NCc5ccccc5", "Nc5ccccc5", "OCC", "OC", "SC",
    "N(C)C", "NC5CC5", "Oc5ccc(F)cc5", "N5CCC(O)CC5", "NCCO", "n5ccnc5", "N5CCC6(CC5)OCCO6",
    "OC(C)(C)C", "NC(C)C(=O)OC", "N[C@@H](C)C(=O)O", "Nc5ccc6ccccc6c5", "C#N", "N=[N+]=[N-]",
    "SCc5ccccc5", "Oc5cccc6ccccc56", "NC5CCCCC5", "Nc5cc(C(F)(F)F)ccc5", "N5CC6CCC5C6",
    "N5CCc6ccccc6C5", "OCC(F)(F)F", "NCC5CCCO5", "c5ccc(O)cc5", "C5=CCCCC5", "C(=O)OC",
    "N5CCC%10(CC5)CC%10", "[13CH3]", "NS(=O)(=O)c5ccccc5", "NC(=O)c5ccccn5", "OP(=O)(O)O",
    "[Se]c5ccccc5", "N5C(=O)c6ccccc6C5=O", "NN",
]
REAGENTS = [
    "", "", "CCN(CC)CC", "O=C([O-])[O-].[K+].[K+]", "ClCCl", "C1CCOC1", "CN(C)C=O",
    "[Na+].[OH-]", "[Pd]", "c1ccc(P(c2ccccc2)c2ccccc2)cc1", "CC(=O)O", "O",
    "CCN(C(C)C)C(C)C", "[Li]CCCC", "O=C([O-])[O-].[Cs+].[Cs+]", "CS(C)=O", "CO",
    "[Fe+3].[Cl-].[Cl-].[Cl-]", "Cl", "[H-].[Na+]", "C1COCCO1", "CC#N", "[Cu]I",
    "CC(C)(C)[O-].[K+]", "O=S(Cl)Cl", "ClCCl.CCN(CC)CC", "[BH4-].[Na+]", "CCOC(C)=O",
    "c1ccncc1", "CN1CCOCC1", "[2H]C([2H])([2H])O[2H]", "Cc1ccccc1",
    "F[B-](F)(F)F.[H+]", "CC(C)O", "[Pd+2].[O-]C(C)=O.[O-]C(C)=O",
]


def substitute(host: str, group: str) -> str:
    return host.replace("*", group)


def make_reaction(rng: random.Random) -> str:
    host = rng.choice(HOSTS)
    guest = rng.choice(GUESTS)
    lg = rng.choice(LEAVING)
    electrophile = substitute(host, lg)
    product = substitute(host, guest)
    reactants = [electrophile, guest]
    if rng.random() < 0.5:
        reactants.reverse()
    reagents = rng.choice(REAGENTS)
    if rng.random() < 0.08:
        # atom-mapped variant of a simple alkylation
        k = rng.randint(1, 99)
        return f"[CH3:{k}][Br:{k + 1}].[OH2:{k + 2}]>{reagents}>[CH3:{k}][OH:{k + 2}]"
    return f"{'.'.join(reactants)}>{reagents}>{product}"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=1200)
    parser.add_argument("--seed", type=int, default=20240917)
    parser.add_argument("--out", type=Path, default=Path(__file__).parents[1] / "src/rxnlm/data/reactions.txt")
    args = parser.parse_args()
    rng = random.Random(args.seed)
    lines = [
        "c1ccccc1C(C)(C)C.ClCl>[Fe+3].[Cl-].[Cl-].[Cl-]>c1cc(Cl)ccc1C(C)(C)C",
    ]
    seen = set(lines)
    while len(lines) < args.n:
        rxn = make_reaction(rng)
        if rxn not in seen:
            seen.add(rxn)
            lines.append(rxn)
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
