"""Writes the bundled world definitions next to this script."""

import json
import pathlib

HERE = pathlib.Path(__file__).parent


def neighbours(h, w, keep=lambda a, b: True):
    for r in range(h):
        for c in range(w):
            i = r * w + c
            if c + 1 < w and keep(i, i + 1):
                yield i, i + 1
            if r + 1 < h and keep(i, i + w):
                yield i, i + w


def agree(k, bonus):
    return [[bonus if a == b else 0.0 for b in range(k)] for a in range(k)]


def write(name, world):
    (HERE / f"{name}.json").write_text(json.dumps(world, indent=1) + "\n")


def disjoint():
    k, h, w = 3, 3, 3
    centre = 4
    unary = [{"i": i, "table": [2.0, 0.0, 0.0]} for i in range(h * w) if i != centre]
    unary.append({"i": centre, "table": [-30.0, 0.0, -30.0], "component": "cat"})
    unary.append({"i": centre, "table": [-30.0, -30.0, 0.0], "component": "dog"})
    edges = [{"i": a, "j": b, "table": agree(k, 0.5)} for a, b in neighbours(h, w) if centre not in (a, b)]
    return {
        "codebook_size": k, "height": h, "width": w,
        "conditions": [{"id": 0, "components": ["scene", "cat"]}, {"id": 1, "components": ["scene", "dog"]}],
        "unary": unary, "edges": edges,
    }


def overlap(common=0.0, own=0.0, veto=-4.0, tie=1.2):
    k, h, w = 3, 3, 3
    unary = []
    for i in range(h * w):
        unary.append({"i": i, "table": [common, veto, veto]})
        unary.append({"i": i, "table": [0.0, own - veto, 0.0], "component": "cat"})
        unary.append({"i": i, "table": [0.0, 0.0, own - veto], "component": "dog"})
    edges = [{"i": a, "j": b, "table": agree(k, tie)} for a, b in neighbours(h, w)]
    return {
        "codebook_size": k, "height": h, "width": w,
        "conditions": [{"id": 0, "components": ["scene", "cat"]}, {"id": 1, "components": ["scene", "dog"]}],
        "unary": unary, "edges": edges,
    }


def bgfg(bg_pref=2.5, bg_tilt=0.6, bg_tie=0.4, fg_tie=0.2):
    k, h, w = 4, 10, 10
    fg = lambda r, c: 2 <= r < 8 and 2 <= c < 8
    same_block = lambda a, b: (a // w) // 2 == (b // w) // 2 and (a % w) // 2 == (b % w) // 2
    unary, edges, regions = [], [], []
    for r in range(h):
        for c in range(w):
            i = r * w + c
            if fg(r, c):
                regions.append("high_freq")
                unary.append({"i": i, "table": [0.0, 0.8, 0.0, 0.4], "component": "cat"})
                unary.append({"i": i, "table": [0.0, 0.0, 0.8, 0.4], "component": "dog"})
            else:
                regions.append("low_freq")
                unary.append({"i": i, "table": [bg_pref, 0.0, 0.0, 0.0]})
                unary.append({"i": i, "table": [0.0, bg_tilt, 0.0, 0.0], "component": "cat"})
                unary.append({"i": i, "table": [0.0, 0.0, bg_tilt, 0.0], "component": "dog"})
    for a, b in neighbours(h, w, same_block):
        tie = fg_tie if regions[a] == "high_freq" else bg_tie
        edges.append({"i": a, "j": b, "table": agree(k, tie)})
    return {
        "codebook_size": k, "height": h, "width": w,
        "conditions": [{"id": 0, "components": ["scene", "cat"]}, {"id": 1, "components": ["scene", "dog"]}],
        "unary": unary, "edges": edges, "regions": regions,
    }


def attractive():
    k, h, w = 4, 3, 3
    unary = []
    for i in range(h * w):
        unary.append({"i": i, "table": [1.0, 0.0, 0.0, 0.0], "component": "cat"})
        unary.append({"i": i, "table": [0.0, 0.0, 1.0, 0.0], "component": "dog"})
    edges = [{"i": a, "j": b, "table": agree(k, 2.0)} for a, b in neighbours(h, w)]
    return {
        "codebook_size": k, "height": h, "width": w,
        "conditions": [{"id": 0, "components": ["scene", "cat"]}, {"id": 1, "components": ["scene", "dog"]}],
        "unary": unary, "edges": edges,
    }


if __name__ == "__main__":
    write("disjoint", disjoint())
    write("overlap", overlap())
    write("bgfg", bgfg())
    write("attractive", attractive())
