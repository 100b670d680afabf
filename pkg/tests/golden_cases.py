"""Fixed inputs whose serialized forms are frozen under tests/golden/."""
from hcdcr.corpus import topic_from_record
from hcdcr.definitions import load_template
from hcdcr.scoring import (MentionPair, RelationClass, build_fewshot_prompt, pair_input, serialize_chatml,
                           serialize_marker_format)

from synthetic import small_record

DEFS = {"m1": "a method that maps graph nodes to vectors",
        "m2": "learning features of data automatically",
        "m3": "embedding the nodes of a graph",
        "m4": "partitioning an image into regions"}

EXAMPLES = [(("m1", "m4"), RelationClass.NONE), (("m1", "m3"), RelationClass.COREF),
            (("m2", "m3"), RelationClass.FIRST_PARENT), (("m1", "m2"), RelationClass.SECOND_PARENT)]
TARGET = ("m3", "m4")


def _item(topic, pair, with_defs):
    p = MentionPair(*pair)
    return pair_input(topic, p, (DEFS[p.first], DEFS[p.second]) if with_defs else None)


def render_all() -> dict[str, str]:
    topic = topic_from_record(small_record())
    system = load_template("chatml_system")
    instruction = load_template("fewshot_instruction")
    out = {}
    for with_defs, suffix in ((False, "plain"), (True, "definitions")):
        item = _item(topic, ("m1", "m2"), with_defs)
        out[f"chatml_{suffix}.txt"] = serialize_chatml(item, system)
        out[f"marker_{suffix}.txt"] = serialize_marker_format(item)
        examples = [(_item(topic, pair, with_defs), label) for pair, label in EXAMPLES]
        out[f"fewshot_{suffix}.txt"] = build_fewshot_prompt(examples, _item(topic, TARGET, with_defs), with_defs,
                                                            instruction, balanced=True)
    return out
