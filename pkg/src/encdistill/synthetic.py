"""Deterministic toy-French corpus with agreement and selectional structure.

Documents are one to three sentences. Determiners and adjectives agree with
the noun in gender and number, verbs agree with the subject, and each verb
only takes objects from its own semantic class, so masked tokens are
predictable from context.
"""
from __future__ import annotations

from importlib import resources

from .seeding import make_rng

# noun: (gender, plural, class)
NOUNS = {
    "chat": ("m", "chats", "animal"), "chien": ("m", "chiens", "animal"),
    "souris": ("f", "souris", "animal"), "vache": ("f", "vaches", "animal"),
    "oiseau": ("m", "oiseaux", "animal"), "poule": ("f", "poules", "animal"),
    "cheval": ("m", "chevaux", "animal"), "chèvre": ("f", "chèvres", "animal"),
    "enfant": ("m", "enfants", "person"), "femme": ("f", "femmes", "person"),
    "homme": ("m", "hommes", "person"), "fille": ("f", "filles", "person"),
    "garçon": ("m", "garçons", "person"), "professeur": ("m", "professeurs", "person"),
    "voisine": ("f", "voisines", "person"), "boulanger": ("m", "boulangers", "person"),
    "pomme": ("f", "pommes", "food"), "pain": ("m", "pains", "food"),
    "fromage": ("m", "fromages", "food"), "soupe": ("f", "soupes", "food"),
    "gâteau": ("m", "gâteaux", "food"), "tarte": ("f", "tartes", "food"),
    "graine": ("f", "graines", "food"), "carotte": ("f", "carottes", "food"),
    "livre": ("m", "livres", "text"), "lettre": ("f", "lettres", "text"),
    "journal": ("m", "journaux", "text"), "histoire": ("f", "histoires", "text"),
    "poème": ("m", "poèmes", "text"), "revue": ("f", "revues", "text"),
    "jardin": ("m", "jardins", "place"), "maison": ("f", "maisons", "place"),
    "forêt": ("f", "forêts", "place"), "village": ("m", "villages", "place"),
    "cuisine": ("f", "cuisines", "place"), "marché": ("m", "marchés", "place"),
}

# adjective: (m.sg, f.sg, m.pl, f.pl)
ADJECTIVES = {
    "petit": ("petit", "petite", "petits", "petites"),
    "grand": ("grand", "grande", "grands", "grandes"),
    "noir": ("noir", "noire", "noirs", "noires"),
    "blanc": ("blanc", "blanche", "blancs", "blanches"),
    "vieux": ("vieux", "vieille", "vieux", "vieilles"),
    "joli": ("joli", "jolie", "jolis", "jolies"),
    "gris": ("gris", "grise", "gris", "grises"),
    "rouge": ("rouge", "rouge", "rouges", "rouges"),
}

# verb: (3sg, 3pl, subject class, object class)
VERBS = [
    ("mange", "mangent", ("animal", "person"), "food"),
    ("prépare", "préparent", ("person",), "food"),
    ("lit", "lisent", ("person",), "text"),
    ("écrit", "écrivent", ("person",), "text"),
    ("regarde", "regardent", ("animal", "person"), "animal"),
    ("cherche", "cherchent", ("animal", "person"), "animal"),
    ("aime", "aiment", ("animal", "person"), "food"),
    ("visite", "visitent", ("person",), "place"),
]

ADVERBS = ["souvent", "toujours", "parfois", "lentement", "vite", "encore"]
TIMES = ["le matin", "le soir", "aujourd'hui", "hier", "la nuit", "demain"]
PLACE_PREP = {"jardin": "dans", "maison": "dans", "forêt": "dans", "village": "dans",
              "cuisine": "dans", "marché": "au"}


def _by_class(cls):
    return sorted(n for n, v in NOUNS.items() if v[2] == cls)


def _noun_phrase(rng, noun, plural, definite=True, adjective_rate=0.5):
    gender, pl_form, _ = NOUNS[noun]
    word = pl_form if plural else noun
    if plural:
        det = "les" if definite else "des"
    elif definite:
        det = "le" if gender == "m" else "la"
    else:
        det = "un" if gender == "m" else "une"
    words = [det, word]
    if rng.random() < adjective_rate:
        forms = ADJECTIVES[sorted(ADJECTIVES)[rng.integers(len(ADJECTIVES))]]
        words.append(forms[(2 if plural else 0) + (gender == "f")])
    return words


def _sentence(rng) -> list[str]:
    sg, pl, subj_classes, obj_class = VERBS[rng.integers(len(VERBS))]
    subj_class = subj_classes[rng.integers(len(subj_classes))]
    subjects = _by_class(subj_class)
    objects = _by_class(obj_class)
    subj_plural = rng.random() < 0.4
    words = _noun_phrase(rng, subjects[rng.integers(len(subjects))], subj_plural)
    words.append(pl if subj_plural else sg)
    if rng.random() < 0.3:
        words.append(ADVERBS[rng.integers(len(ADVERBS))])
    words += _noun_phrase(rng, objects[rng.integers(len(objects))], rng.random() < 0.4,
                          definite=rng.random() < 0.6)
    if rng.random() < 0.35:
        places = sorted(PLACE_PREP)
        place = places[rng.integers(len(places))]
        prep = PLACE_PREP[place]
        if prep == "au":
            words += ["au", place]
        else:
            words += [prep] + _noun_phrase(rng, place, False, adjective_rate=0.2)
    if rng.random() < 0.25:
        words += TIMES[rng.integers(len(TIMES))].split()
    words.append(".")
    return words


def generate_corpus(seed: int = 0, target_bytes: int = 200_000) -> list[str]:
    rng = make_rng(seed)
    lines, size = [], 0
    while size < target_bytes:
        sentences = [" ".join(_sentence(rng)) for _ in range(1 + rng.integers(3))]
        line = " ".join(sentences)
        lines.append(line)
        size += len(line.encode("utf-8")) + 1
    return lines


def bundled_corpus_path():
    return resources.files("encdistill") / "data" / "synthetic_corpus.txt"


def load_bundled_corpus() -> list[str]:
    text = bundled_corpus_path().read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def split_corpus(lines: list[str], heldout_fraction: float = 0.05) -> tuple[list[str], list[str]]:
    """Deterministic train/held-out split: the last fraction of documents is held out."""
    k = max(1, int(round(len(lines) * heldout_fraction)))
    return lines[:-k], lines[-k:]
