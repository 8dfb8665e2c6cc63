#!/usr/bin/env python3
"""Seeded generator for small kekulized C/N/O/F molecules.

usage: make_corpus.py COUNT MAX_ATOMS SEED > out.smi
"""
import argparse
import random

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
WEIGHTS = [("C", 0.62), ("N", 0.15), ("O", 0.18), ("F", 0.05)]


def pick(rng):
    r = rng.random()
    for sym, w in WEIGHTS:
        if r < w:
            return sym
        r -= w
    return "C"


def molecule(rng, n):
    atoms = [pick(rng)]
    bonds = {}
    used = [0]
    for a in range(1, n):
        sym = pick(rng)
        cands = [i for i in range(a) if used[i] < VALENCE[atoms[i]]]
        if not cands:
            return None
        p = rng.choice(cands)
        atoms.append(sym)
        used.append(0)
        bonds[(p, a)] = 1
        used[p] += 1
        used[a] += 1
    # ring closures
    for _ in range(rng.choice([0, 0, 1, 1, 2])):
        i, j = rng.sample(range(n), 2) if n > 2 else (0, 0)
        if i == j or (min(i, j), max(i, j)) in bonds:
            continue
        if used[i] < VALENCE[atoms[i]] and used[j] < VALENCE[atoms[j]]:
            bonds[(min(i, j), max(i, j))] = 1
            used[i] += 1
            used[j] += 1
    # raise some bond orders
    for key in list(bonds):
        if rng.random() < 0.25:
            i, j = key
            extra = min(VALENCE[atoms[i]] - used[i], VALENCE[atoms[j]] - used[j], 3 - bonds[key])
            if extra > 0:
                k = rng.randint(1, extra)
                bonds[key] += k
                used[i] += k
                used[j] += k
    return atoms, bonds


def to_smiles(atoms, bonds):
    n = len(atoms)
    adj = {i: [] for i in range(n)}
    for (i, j), o in bonds.items():
        adj[i].append((j, o))
        adj[j].append((i, o))
    for i in adj:
        adj[i].sort()
    sym = {1: "", 2: "=", 3: "#"}
    seen, tree = set(), set()

    def mark(u):
        seen.add(u)
        for v, _ in adj[u]:
            if v not in seen:
                tree.add((min(u, v), max(u, v)))
                mark(v)

    mark(0)
    rings = [k for k in bonds if k not in tree]
    labels = {}
    for d, k in enumerate(rings, start=1):
        labels.setdefault(k[0], []).append((d, bonds[k]))
        labels.setdefault(k[1], []).append((d, 0))
    out = []
    done = set()

    def emit(u):
        done.add(u)
        out.append(atoms[u])
        for d, o in labels.get(u, []):
            out.append(sym.get(o, "") + str(d))
        kids = [(v, o) for v, o in adj[u] if v not in done and (min(u, v), max(u, v)) in tree]
        for idx, (v, o) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(sym[o])
            emit(v)
            if not last:
                out.append(")")

    emit(0)
    return "".join(out)


def main():
    ap = argparse.ArgumentParser(description="Write random kekulized molecules as SMILES lines.")
    ap.add_argument("--count", type=int, required=True)
    ap.add_argument("--max-atoms", type=int, required=True)
    ap.add_argument("--seed", type=int, required=True)
    args = ap.parse_args()
    count, max_atoms, seed = args.count, args.max_atoms, args.seed
    rng = random.Random(seed)
    seen = set()
    lines = []
    while len(lines) < count:
        n = rng.randint(max(2, max_atoms - 4), max_atoms)
        m = molecule(rng, n)
        if m is None:
            continue
        s = to_smiles(*m)
        if s in seen:
            continue
        seen.add(s)
        lines.append(s)
    print("# %d generated molecules, at most %d heavy atoms (seed %d)" % (count, max_atoms, seed))
    print("\n".join(lines))


if __name__ == "__main__":
    main()
