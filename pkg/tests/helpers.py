"""Shared test utilities."""

import importlib.resources as resources
import json

import numpy as np

from calciflow.chem import N_SPECIES, SpeciesId, SpeciesSet


def make_custom_set(**overrides):
    """Species set with synthetic property values for closed-form checks."""
    data = json.loads(
        resources.files("calciflow").joinpath("data/species.json").read_text("utf-8")
    )
    for rec in data["species"]:
        if rec["id"] in overrides:
            rec.update(overrides[rec["id"]])
    return SpeciesSet.from_dict(data)


def n_of(**amounts):
    n = np.zeros(N_SPECIES)
    for name, v in amounts.items():
        n[SpeciesId[name.upper()]] = v
    return n
