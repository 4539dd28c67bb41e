"""Class-name prompt construction: a single handcrafted template or the
7-template ensemble commonly used with the pretrained encoder on broad
datasets. Which templates were used is recorded in the exported bundle's
meta blob for provenance.
"""

SINGLE_TEMPLATE = "a photo of a {}."

ENSEMBLE_TEMPLATES = [
    "itap of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
]

PROMPT_MODES = ("single", "ensemble")


def templates_for(mode: str) -> list[str]:
    if mode == "single":
        return [SINGLE_TEMPLATE]
    if mode == "ensemble":
        return list(ENSEMBLE_TEMPLATES)
    raise ValueError(f"prompt mode must be one of {PROMPT_MODES}, got {mode!r}")


def prompts_for_class(class_name: str, mode: str) -> list[str]:
    # directory-style class names read better with spaces
    name = class_name.replace("_", " ")
    return [t.format(name) for t in templates_for(mode)]
