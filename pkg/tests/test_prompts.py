from __future__ import annotations

import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltext.errors import EmptyTextError, EntityNotInTextError, NoEntitiesFoundError
from causaltext.graph import Entity
from causaltext.prompts import (
    OrientationQuestion,
    RenderedPrompt,
    Verdict,
    entity_offset,
    find_first_offset,
    parse_entity_list,
    parse_verdict,
    render_entity_prompt,
    render_orientation_prompt,
    render_reask_prompt,
)
from conftest import DATA_DIR

COBALT_SENTENCE = (
    "Cobalt metal fume and dust cause upper respiratory tract irritation, "
    "chronic interstitial pneumonitis, and skin sensitization."
)


def cobalt_question() -> OrientationQuestion:
    fume = Entity(
        id="fume", canonical_label="fume",
        first_offset=COBALT_SENTENCE.index("fume"),
    )
    sensitization = Entity(
        id="sensitization", canonical_label="sensitization",
        first_offset=COBALT_SENTENCE.index("sensitization"),
    )
    return OrientationQuestion.from_pair(COBALT_SENTENCE, fume, sensitization)


# --- orientation prompt ----------------------------------------------------


def test_orientation_prompt_matches_golden_template():
    rendered = render_orientation_prompt(cobalt_question())
    golden = (DATA_DIR / "orientation_golden.txt").read_text(encoding="utf-8")
    assert rendered.user_text == golden
    assert rendered.system_text == ""


def test_orientation_prompt_structure():
    import re

    text = render_orientation_prompt(cobalt_question()).user_text
    assert len(re.findall(r"<Text>.+?</Text>", text, re.DOTALL)) == 1
    assert len(re.findall(r"<Entity>.+?</Entity>", text)) == 2
    for option in ("A:", "B:", "C:"):
        assert text.count(option) == 1


def test_question_roles_follow_document_order():
    question = cobalt_question()
    swapped = OrientationQuestion.from_pair(
        COBALT_SENTENCE, question.entity_b, question.entity_a
    )
    assert swapped.entity_a.id == "fume"
    assert render_orientation_prompt(swapped) == render_orientation_prompt(question)


def test_swapping_roles_swaps_only_the_option_labels():
    text = "the reaction preceded the signal here"
    reaction = Entity(id="reaction", canonical_label="reaction", first_offset=4)
    signal = Entity(id="signal", canonical_label="signal", first_offset=26)
    forward = render_orientation_prompt(
        OrientationQuestion.from_pair(text, reaction, signal)
    ).user_text
    mirrored = render_orientation_prompt(
        OrientationQuestion(
            source_text=text,
            entity_a=Entity(id="signal", canonical_label="signal", first_offset=0),
            entity_b=Entity(id="reaction", canonical_label="reaction", first_offset=9),
        )
    ).user_text
    assert 'A: "reaction" causes "signal";' in forward
    assert 'A: "signal" causes "reaction";' in mirrored
    changed = [
        (a, b)
        for a, b in zip(forward.splitlines(), mirrored.splitlines())
        if a != b
    ]
    for line_a, line_b in changed:
        assert "<Entity>" in line_a or '"' in line_a


def test_identical_inputs_identical_fingerprint():
    first = render_orientation_prompt(cobalt_question())
    second = render_orientation_prompt(cobalt_question())
    assert first.fingerprint == second.fingerprint
    assert first == second


def test_question_requires_entities_in_text():
    fume = Entity(id="fume", canonical_label="fume", first_offset=0)
    absent = Entity(id="smoke", canonical_label="smoke", first_offset=1)
    with pytest.raises(EntityNotInTextError):
        OrientationQuestion.from_pair(COBALT_SENTENCE, fume, absent)


def test_question_requires_distinct_entities():
    fume = Entity(id="fume", canonical_label="fume", first_offset=0)
    with pytest.raises(ValueError):
        OrientationQuestion.from_pair(COBALT_SENTENCE, fume, fume)


def test_reask_prompt_appends_reminder_and_changes_fingerprint():
    prompt = render_orientation_prompt(cobalt_question())
    reask = render_reask_prompt(prompt)
    assert reask.user_text.startswith(prompt.user_text.rstrip("\n"))
    assert "<Answer>A</Answer>" in reask.user_text
    assert reask.fingerprint != prompt.fingerprint
    assert render_reask_prompt(prompt) == reask


# --- verdict parsing ----------------------------------------------------------


def test_parse_verdict_examples():
    assert parse_verdict("analysis first\n<Answer>A</Answer>").verdict is Verdict.FORWARD
    assert parse_verdict("<Answer>a</Answer>").verdict is Verdict.FORWARD
    assert parse_verdict("<Answer> B </Answer>").verdict is Verdict.BACKWARD
    assert parse_verdict("<Answer>C</Answer>").verdict is Verdict.NO_RELATION


def test_parse_verdict_last_tag_wins():
    parsed = parse_verdict("<Answer>B</Answer> but on reflection <Answer>C</Answer>")
    assert parsed.verdict is Verdict.NO_RELATION
    assert parsed.rationale_text == "<Answer>B</Answer> but on reflection "


def test_parse_verdict_unparsable_cases():
    assert parse_verdict("").verdict is Verdict.UNPARSABLE
    assert parse_verdict("no tags at all").verdict is Verdict.UNPARSABLE
    assert parse_verdict("<Answer>D</Answer>").verdict is Verdict.UNPARSABLE
    assert parse_verdict("<Answer></Answer>").verdict is Verdict.UNPARSABLE
    assert parse_verdict("<Answer>A").verdict is Verdict.UNPARSABLE


def test_parse_verdict_rationale_is_full_text_without_tag():
    reply = "thinking about it"
    assert parse_verdict(reply).rationale_text == reply


def test_parse_verdict_single_characters_exhaustively():
    for char in string.printable:
        parsed = parse_verdict(f"<Answer>{char}</Answer>")
        expected = {
            "a": Verdict.FORWARD, "A": Verdict.FORWARD,
            "b": Verdict.BACKWARD, "B": Verdict.BACKWARD,
            "c": Verdict.NO_RELATION, "C": Verdict.NO_RELATION,
        }.get(char, Verdict.UNPARSABLE)
        if char.isspace():
            expected = Verdict.UNPARSABLE
        assert parsed.verdict is expected, char


@given(st.text(max_size=200))
@settings(max_examples=300, deadline=None)
def test_parse_verdict_is_total(reply):
    parsed = parse_verdict(reply)
    assert parsed.verdict in set(Verdict)
    tagged = parsed.verdict in (Verdict.FORWARD, Verdict.BACKWARD, Verdict.NO_RELATION)
    assert tagged == ("<answer>" in reply.lower() and "</answer>" in reply.lower()) or not tagged


# --- entity prompt -----------------------------------------------------------------


def test_entity_prompt_interpolates_domain_emphasis():
    hint = "diseases, medications, treatments, and symptoms"
    rendered = render_entity_prompt("FT1D damages beta cells.", hint)
    assert f"emphasis on {hint}." in rendered.user_text
    for category in ("diseases", "medications", "treatments", "symptoms"):
        assert category in rendered.user_text


def test_entity_prompt_omits_emphasis_without_hint():
    rendered = render_entity_prompt("FT1D damages beta cells.", "")
    assert "emphasis" not in rendered.user_text


def test_entity_prompt_deterministic_and_rejects_empty_text():
    first = render_entity_prompt("some text", "medical")
    second = render_entity_prompt("some text", "medical")
    assert first.fingerprint == second.fingerprint
    with pytest.raises(EmptyTextError):
        render_entity_prompt("   \n", "medical")


# --- entity list parsing --------------------------------------------------------------


def test_parse_entity_list_groups_and_spans():
    reply = (
        "<Entity>FT1D</Entity>\n"
        "<Group><Entity>fulminant type 1 diabetes</Entity><Entity>FT1D</Entity></Group>"
    )
    listing = parse_entity_list(reply)
    assert listing.entities == ("ft1d", "fulminant type 1 diabetes")
    assert listing.merge_groups == (frozenset({"ft1d", "fulminant type 1 diabetes"}),)


def test_parse_entity_list_deduplicates_preserving_first_occurrence():
    listing = parse_entity_list(
        "<Entity>Beta cells</Entity><Entity>FT1D</Entity><Entity>beta  cells</Entity>"
    )
    assert listing.entities == ("beta cells", "ft1d")


def test_parse_entity_list_rejects_malformed_replies():
    with pytest.raises(NoEntitiesFoundError):
        parse_entity_list("no tags here")
    with pytest.raises(NoEntitiesFoundError):
        parse_entity_list("<Entity></Entity><Entity>   </Entity>")


def test_parse_entity_list_merges_overlapping_groups():
    reply = (
        "<Entity>a</Entity><Entity>b</Entity><Entity>c</Entity>"
        "<Group><Entity>a</Entity><Entity>b</Entity></Group>"
        "<Group><Entity>b</Entity><Entity>c</Entity></Group>"
    )
    listing = parse_entity_list(reply)
    assert listing.merge_groups == (frozenset({"a", "b", "c"}),)


def test_parse_entity_list_drops_singleton_groups():
    listing = parse_entity_list(
        "<Entity>a</Entity><Group><Entity>a</Entity><Entity>A</Entity></Group>"
    )
    assert listing.merge_groups == ()


# --- offsets ------------------------------------------------------------------------


def test_find_first_offset_is_case_insensitive_and_wrap_tolerant():
    text = "Severe Beta\n   Cell damage precedes beta cell loss."
    assert find_first_offset(text, "beta cell") == 7
    assert find_first_offset(text, "missing") is None


def test_entity_offset_takes_earliest_surface_form():
    text = "FT1D, also called fulminant type 1 diabetes, progresses fast."
    entity = Entity(
        id="x",
        canonical_label="fulminant type 1 diabetes",
        surface_forms=frozenset({"ft1d"}),
    )
    assert entity_offset(text, entity) == 0


def test_rendered_prompt_create_matches_manual_fingerprint():
    prompt = RenderedPrompt.create("sys", "user")
    again = RenderedPrompt.create("sys", "user")
    assert prompt.fingerprint == again.fingerprint
    different = RenderedPrompt.create("sys", "user2")
    assert different.fingerprint != prompt.fingerprint
