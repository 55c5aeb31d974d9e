#!/usr/bin/env python3
"""Generates the WNDB-format lexical databases bundled with rvl-core.

Two databases are produced:

  crates/rvl-core/resources/wndb-micro   toy-world vocabulary (shipped)
  crates/rvl-core/testdata/wndb-mini     12-synset loader fixture (tests)

The files follow the wndb(5WN) plain-text layout: per part of speech one
index.<pos> and one data.<pos>, synset_offset fields equal to the byte offset
of the line inside the data file, license-style header lines prefixed with
two spaces. Hypernym pointers are written as '@', adjective cluster edges as
'&' on both the head and its satellites; hyponym ('~') lines are deliberately
absent because loaders synthesize them as inverses.

Run from the repository root:  python3 scripts/gen_wndb.py
"""

import os

HEADER = (
    "  1 This file is part of a compact lexical database in WNDB format.  \n"
    "  2 It is generated by scripts/gen_wndb.py; regenerate instead of editing.  \n"
    "  3 Layout per wndb(5WN): one index and one data file per part of speech.  \n"
    "  4 Lines that begin with whitespace are header lines skipped by loaders.  \n"
)

LEXFILE = {"n": 3, "v": 38, "a": 0, "s": 0, "r": 2}
POS_FILES = {"n": "noun", "v": "verb", "a": "adj", "r": "adv"}


class Syn:
    def __init__(self, key, ss, lemmas, gloss, hyper=(), similar=()):
        self.key = key
        self.ss = ss  # n v a s r
        self.lemmas = lemmas
        self.gloss = gloss
        self.hyper = list(hyper)
        self.similar = list(similar)
        self.offset = 0

    @property
    def pos(self):
        return "a" if self.ss == "s" else self.ss


def noun(key, lemmas, hyper=None, gloss=""):
    return Syn(key, "n", lemmas, gloss, hyper=[hyper] if hyper else [])


def verb(key, lemmas, hyper=None, gloss=""):
    return Syn(key, "v", lemmas, gloss, hyper=[hyper] if hyper else [])


def adj_cluster(head_key, head_lemmas, head_gloss, satellites):
    """Head adjective plus satellites, '&' edges in both directions."""
    out = [Syn(head_key, "a", head_lemmas, head_gloss,
               similar=[k for k, _, _ in satellites])]
    for key, lemmas, gloss in satellites:
        out.append(Syn(key, "s", lemmas, gloss, similar=[head_key]))
    return out


def adv(key, lemmas, gloss=""):
    return Syn(key, "r", lemmas, gloss)


def micro_synsets():
    s = []
    # noun hierarchy; shape nouns of the toy world are leaves with siblings
    s += [
        noun("entity", ["entity"], gloss="that which is perceived to exist"),
        noun("physical_entity", ["physical_entity"], "entity",
             "an entity that has physical existence"),
        noun("abstraction", ["abstraction"], "entity",
             "a general concept with no physical referent"),
        noun("object", ["object"], "physical_entity",
             "a tangible and visible entity"),
        noun("living_thing", ["living_thing"], "object",
             "a thing capable of growth"),
        noun("artifact", ["artifact"], "object",
             "a man-made object"),
        noun("animal", ["animal"], "living_thing",
             "a living organism that feeds on organic matter"),
        noun("plant", ["plant"], "living_thing",
             "a living organism lacking the power of locomotion"),
        noun("canine", ["canine"], "animal",
             "a mammal of the family that includes dogs and wolves"),
        noun("feline", ["feline"], "animal",
             "a mammal of the family that includes cats and lions"),
        noun("bird", ["bird"], "animal",
             "a warm-blooded egg-laying animal with feathers"),
        noun("bat_animal", ["bat"], "animal",
             "a nocturnal flying mammal"),
        noun("dog", ["dog", "domestic_dog"], "canine",
             "a domesticated canine kept as a pet or for work"),
        noun("wolf", ["wolf"], "canine",
             "a wild canine that hunts in packs"),
        noun("fox", ["fox"], "canine",
             "a wild canine with a pointed muzzle and bushy tail"),
        noun("cat", ["cat"], "feline",
             "a small domesticated feline"),
        noun("tiger", ["tiger"], "feline",
             "a large striped wild feline"),
        noun("lion", ["lion"], "feline",
             "a large tawny wild feline"),
        noun("duck", ["duck"], "bird",
             "a swimming bird with a broad flat bill"),
        noun("owl", ["owl"], "bird",
             "a nocturnal bird of prey"),
        noun("crow", ["crow"], "bird",
             "a large black bird with a harsh call"),
        noun("grass", ["grass"], "plant",
             "a plant with narrow leaves grown as ground cover"),
        noun("tree", ["tree"], "plant",
             "a tall perennial woody plant"),
        noun("flower", ["flower"], "plant",
             "a plant cultivated for its blooms"),
        noun("vehicle", ["vehicle"], "artifact",
             "a conveyance that transports people or goods"),
        noun("furniture", ["furniture"], "artifact",
             "movable articles that make a room fit for living"),
        noun("equipment", ["equipment"], "artifact",
             "an instrumentality needed for an undertaking"),
        noun("car", ["car"], "vehicle",
             "a motor vehicle with four wheels"),
        noun("boat", ["boat"], "vehicle",
             "a small vessel for travel on water"),
        noun("truck", ["truck"], "vehicle",
             "a motor vehicle for carrying loads"),
        noun("bus", ["bus"], "vehicle",
             "a large motor vehicle carrying passengers"),
        noun("chair", ["chair"], "furniture",
             "a seat for one person with a back"),
        noun("table", ["table"], "furniture",
             "a piece of furniture with a flat top and legs"),
        noun("bed", ["bed"], "furniture",
             "a piece of furniture for sleeping on"),
        noun("sofa", ["sofa"], "furniture",
             "an upholstered seat for more than one person"),
        noun("ball", ["ball"], "equipment",
             "a round object used in games"),
        noun("bat_equipment", ["bat"], "equipment",
             "a club used to strike a ball"),
        noun("kite", ["kite"], "equipment",
             "a light frame covered with fabric flown in the wind"),
        noun("idea", ["idea"], "abstraction",
             "the content of cognition"),
        noun("plan", ["plan"], "abstraction",
             "a series of steps to be carried out"),
    ]
    # verbs: two sibling groups under a shared root, for order-2 traversal
    s += [
        verb("act", ["act"], gloss="perform an action"),
        verb("move", ["move"], "act", "change location or position"),
        verb("rest", ["rest"], "act", "stay in a settled position"),
        verb("run", ["run"], "move", "move fast on foot"),
        verb("walk", ["walk"], "move", "move at a regular pace on foot"),
        verb("jump", ["jump"], "move", "propel oneself upward"),
        verb("fly", ["fly"], "move", "travel through the air"),
        verb("swim", ["swim"], "move", "travel through water"),
        verb("duck_v", ["duck"], "move", "lower the head or body quickly"),
        verb("sit", ["sit"], "rest", "be seated"),
        verb("stand", ["stand"], "rest", "be upright on the feet"),
        verb("lie", ["lie"], "rest", "be in a horizontal position"),
    ]
    # adjective clusters; colors are the toy attribute vocabulary
    s += adj_cluster(
        "colored", ["colored"], "having color",
        [
            ("red", ["red"], "of the color of blood"),
            ("blue", ["blue"], "of the color of the clear sky"),
            ("green", ["green"], "of the color of grass"),
            ("yellow", ["yellow"], "of the color of ripe lemons"),
            ("black", ["black"], "of the darkest achromatic color"),
            ("white", ["white"], "of the lightest achromatic color"),
            ("purple", ["purple"], "of a color between red and blue"),
            ("orange", ["orange"], "of a color between red and yellow"),
        ],
    )
    s += adj_cluster(
        "written", ["written"], "set down in a system of characters",
        [
            ("roman", ["roman"], "of the upright style of numerals or type"),
            ("arabic", ["arabic"], "of the decimal style of numerals"),
            ("italic", ["italic"], "of a slanted style of type"),
        ],
    )
    s += [
        adv("quickly", ["quickly"], "with speed"),
        adv("slowly", ["slowly"], "without speed"),
    ]
    return s


def mini_synsets():
    return [
        noun("entity", ["entity"], gloss="that which is perceived to exist"),
        noun("physical_entity", ["physical_entity"], "entity",
             "an entity that has physical existence"),
        noun("object", ["object"], "physical_entity",
             "a tangible and visible entity"),
        noun("animal", ["animal"], "object",
             "a living organism that feeds on organic matter"),
        noun("canine", ["canine"], "animal",
             "a mammal of the family that includes dogs and wolves"),
        noun("dog", ["dog", "domestic_dog"], "canine",
             "a domesticated canine kept as a pet or for work"),
        noun("wolf", ["wolf"], "canine",
             "a wild canine that hunts in packs"),
        noun("cat", ["cat"], "animal",
             "a small domesticated feline"),
        verb("move", ["move"], gloss="change location or position"),
        verb("run", ["run"], "move", "move fast on foot"),
        Syn("red", "a", ["red"], "of the color of blood"),
        adv("quickly", ["quickly"], "with speed"),
    ]


def render_data_line(syn, by_key):
    words = " ".join(f"{w} 0" for w in syn.lemmas)
    ptrs = []
    for k in syn.hyper:
        ptrs.append(("@", k))
    for k in syn.similar:
        ptrs.append(("&", k))
    ptr_txt = "".join(
        f" {sym} {by_key[k].offset:08d} {by_key[k].pos} 0000" for sym, k in ptrs
    )
    frames = " 01 + 02 00" if syn.ss == "v" else ""
    return (
        f"{syn.offset:08d} {LEXFILE[syn.ss]:02d} {syn.ss} "
        f"{len(syn.lemmas):02x} {words} {len(ptrs):03d}{ptr_txt}{frames} "
        f"| {syn.gloss}  \n"
    )


def write_db(synsets, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    by_key = {s.key: s for s in synsets}
    by_pos = {p: [s for s in synsets if s.pos == p] for p in POS_FILES}

    # offsets are byte positions; line lengths do not depend on offset values
    # because every offset field is fixed at eight digits
    for syns in by_pos.values():
        running = len(HEADER.encode())
        for s in syns:
            s.offset = running
            running += len(render_data_line(s, by_key).encode())
    # second pass with final offsets; lengths must be unchanged
    for p, syns in by_pos.items():
        body = ""
        at = len(HEADER.encode())
        for s in syns:
            line = render_data_line(s, by_key)
            assert s.offset == at, f"{s.key}: offset drifted"
            at += len(line.encode())
            body += line
        with open(os.path.join(out_dir, f"data.{POS_FILES[p]}"), "w") as f:
            f.write(HEADER + body)

    for p, syns in by_pos.items():
        lemma_order = []
        lemma_syns = {}
        for s in syns:  # declaration order defines database sense order
            for w in s.lemmas:
                if w not in lemma_syns:
                    lemma_order.append(w)
                    lemma_syns[w] = []
                lemma_syns[w].append(s)
        lines = []
        for w in sorted(lemma_order):
            entries = lemma_syns[w]
            symbols = sorted({sym for s in entries for sym in
                              (["@"] * bool(s.hyper)) + (["&"] * bool(s.similar))})
            n = len(entries)
            offs = " ".join(f"{s.offset:08d}" for s in entries)
            sym_txt = (" " + " ".join(symbols)) if symbols else ""
            lines.append(f"{w} {p} {n} {len(symbols)}{sym_txt} {n} 0 {offs}  \n")
        with open(os.path.join(out_dir, f"index.{POS_FILES[p]}"), "w") as f:
            f.write(HEADER + "".join(lines))


def main():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    write_db(micro_synsets(),
             os.path.join(root, "crates/rvl-core/resources/wndb-micro"))
    write_db(mini_synsets(),
             os.path.join(root, "crates/rvl-core/testdata/wndb-mini"))
    print("wrote wndb-micro and wndb-mini")


if __name__ == "__main__":
    main()
