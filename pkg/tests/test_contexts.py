from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxaug.contexts import (
    ContextTemplate,
    PLACEHOLDER,
    gen_regression_contexts,
    gen_two_sample_contexts,
    get_profile,
    jabberwocky_variant,
    load_profiles,
    mask_variant,
    preserves_function_words,
    shuffle_variant,
)
from ctxaug.contexts.profiles import PromptProfile, template_slots
from ctxaug.contexts.variants import function_words, parse_llm_jabberwocky
from ctxaug.errors import ConfigError, PartialOutputError, TransportError
from ctxaug.lm import GenerationParams, MockLM, MockLmConfig
from ctxaug.records import StringRecord
from ctxaug.text import tokenize, words

FUNCTION = sorted(function_words())
word_st = st.one_of(
    st.sampled_from(FUNCTION),
    st.from_regex(r"[A-Za-z]{1,9}", fullmatch=True),
    st.from_regex(r"[0-9]{1,4}", fullmatch=True),
    st.sampled_from(["don't", "naïve", "Zürich", "I'm", "e-mail"]),
)
sep_st = st.sampled_from([" ", "  ", ", ", ". ", "! ", "? ", " - ", "; ", "\t", "\n", " (", ") "])
sentence_st = st.lists(st.tuples(word_st, sep_st), min_size=1, max_size=14).map(
    lambda xs: "".join(w + s for w, s in xs).strip())


# profiles -------------------------------------------------------------------

def test_shipped_profiles_load():
    profs = load_profiles()
    assert {"synthetic-categories", "egami-vignette", "delidata"} <= set(profs)
    for p in profs.values():
        assert len(p.digest()) == 16
        assert p.params("generation").temperature == 0.8
        assert p.params("regression_generation").temperature == 1.0
        assert p.params("jabberwocky_generation").temperature == 1.2


def test_profile_rendering():
    p = get_profile("synthetic-categories")
    assert "zebra" in p.definition("zebra")
    assert "'zebra'" in p.left("zebra", "a striped horse") or "zebra" in p.left("zebra", "a striped horse")
    assert p.jabberwocky("the cat sat").rstrip().endswith("'the cat sat'")
    v = get_profile("egami-vignette")
    assert v.base_prompt_for("treatment") != v.base_prompt_for("control")


def test_unknown_profile():
    with pytest.raises(ConfigError):
        get_profile("nope")


@pytest.mark.parametrize("tmpl,ok", [("{word} is", True), ("{word} {bogus}", False), ("{word!r}", False),
                                     ("{}", False), ("{word", False)])
def test_template_slot_validation(tmpl, ok):
    kw = dict(name="x", definition_prompt=tmpl, left_prompt="{word} {definition}",
              right_prompt="{word} {left}", regression_context_prompt="{predictor}")
    if ok:
        PromptProfile(**kw)
    else:
        with pytest.raises(ConfigError):
            PromptProfile(**kw)


def test_template_slots():
    assert template_slots("a {word} b {left} {word}") == {"word", "left"}


def test_profile_file(tmp_path):
    f = tmp_path / "p.yaml"
    f.write_text("version: 1\njabberwocky_prompt: \"Input: '{predictor}'\"\nprofiles:\n"
                 "  mine:\n    definition_prompt: 'Define {word}'\n    left_prompt: '{word}: {definition}'\n"
                 "    right_prompt: '{word} {left}'\n    regression_context_prompt: 'About {predictor}'\n")
    assert get_profile("mine", f).definition("x") == "Define x"


# templates ------------------------------------------------------------------

def test_template_fill_span():
    t = ContextTemplate("s#0", "s", "A", "left side", "right side")
    text, (a, b) = t.fill("the string")
    assert text[a:b] == "the string"
    assert t.text == f"left side {PLACEHOLDER} right side"
    assert t.context_text == "left side right side"
    assert ContextTemplate.from_dict(t.as_dict()) == t
    r = ContextTemplate("p#0", "p", None, "reflection", "")
    text, (a, b) = r.fill("y")
    assert text == "reflection y" and text[a:b] == "y"


def test_template_rejects_placeholder():
    with pytest.raises(ValueError):
        ContextTemplate("s#0", "s", "A", f"a {PLACEHOLDER}", "")


# generation -----------------------------------------------------------------

def _strings(n=3):
    return [StringRecord(f"s{i}", f"animals thing {i}", "A") for i in range(n)]


def test_two_sample_contexts_shape_and_provenance(mock, profile):
    ss = _strings()
    out = gen_two_sample_contexts(ss, 3, profile, profile.params(seed=1), mock)
    assert [t.id for t in out] == [f"s{i}#{j}" for i in range(3) for j in range(3)]
    assert all(t.group_label == "A" for t in out)
    assert all(PLACEHOLDER not in t.left_text + t.right_text for t in out)
    assert out == gen_two_sample_contexts(ss, 3, profile, profile.params(seed=1), mock, workers=3)
    assert out != gen_two_sample_contexts(ss, 3, profile, profile.params(seed=2), mock)


def test_contexts_nested_across_budgets(mock, profile):
    ss = _strings(2)
    small = gen_two_sample_contexts(ss, 2, profile, profile.params(seed=1), mock)
    big = gen_two_sample_contexts(ss, 4, profile, profile.params(seed=1), mock)
    assert set(small) <= set(big)


class _Failing:
    """Delegates to the mock until ``fail_on`` appears in a prompt."""

    def __init__(self, inner, fail_on):
        self.inner, self.fail_on, self.calls = inner, fail_on, 0

    def generate(self, prompt, params):
        self.calls += 1
        if self.fail_on in prompt:
            raise TransportError("down")
        return self.inner.generate(prompt, params)

    def score(self, *a):
        return self.inner.score(*a)

    def capabilities(self):
        return self.inner.capabilities()


def test_partial_output_and_resume(mock, profile):
    ss = _strings(3)
    params = profile.params(seed=1)
    full = gen_two_sample_contexts(ss, 2, profile, params, mock)
    with pytest.raises(PartialOutputError) as e:
        gen_two_sample_contexts(ss, 2, profile, params, _Failing(mock, "thing 1"))
    done = e.value.completed
    assert {t.source_string_id for t in done} == {"s0", "s2"}
    counting = _Failing(mock, "never")
    resumed = gen_two_sample_contexts(ss, 2, profile, params, counting, completed=done)
    assert resumed == full
    assert counting.calls == 1 + 2 + 2  # only s1 regenerated


def test_regression_contexts(mock, profile):
    p = StringRecord("p", "animals are great")
    out = gen_regression_contexts(p, 3, profile, profile.params("regression_generation", 4), mock)
    assert [t.id for t in out] == ["p#0", "p#1", "p#2"]
    assert all(t.right_text == "" and t.group_label is None for t in out)


def test_empty_string_rejected(mock, profile):
    with pytest.raises(ValueError):
        gen_two_sample_contexts([StringRecord("e", "")], 1, profile, profile.params(), mock)


# negative controls ------------------------------------------------------------

def test_mask_examples():
    assert mask_variant("The cat, 3 dogs!", "<m>").text == "<m> <m>, <m> <m>!"


def test_shuffle_example_deterministic():
    a = shuffle_variant("one two three four five", 3).text
    assert a == shuffle_variant("one two three four five", 3).text
    assert sorted(a.split()) == sorted("one two three four five".split())


def test_rule_jabberwocky_example():
    src = "The cat sat on the mat, and it was happy."
    out = jabberwocky_variant(src, "rule", seed=1).text
    assert preserves_function_words(src, out)
    assert out.split()[0][0].isupper()
    for a, b in zip(words(src), words(out)):
        if a.lower() not in function_words():
            assert a.lower() != b.lower()


@given(sentence_st, st.integers(0, 2**32))
@settings(max_examples=300, deadline=None)
def test_mask_preserves_token_count(s, _):
    m = mask_variant(s, "<mask>").text
    assert len(tokenize(m, ("<mask>",))) == len(tokenize(s))


@given(sentence_st, st.integers(0, 2**32))
@settings(max_examples=300, deadline=None)
def test_shuffle_preserves_word_multiset(s, seed):
    assert Counter(words(shuffle_variant(s, seed).text)) == Counter(words(s))


@given(sentence_st, st.integers(0, 2**32))
@settings(max_examples=300, deadline=None)
def test_rule_jabberwocky_preserves_function_words(s, seed):
    out = jabberwocky_variant(s, "rule", seed).text
    assert preserves_function_words(s, out)
    assert len(tokenize(out)) == len(tokenize(s))


@given(st.text(max_size=60), st.integers(0, 2**16))
@settings(max_examples=300, deadline=None)
def test_controls_on_arbitrary_text(s, seed):
    assert Counter(words(shuffle_variant(s, seed).text)) == Counter(words(s))
    assert preserves_function_words(s, jabberwocky_variant(s, "rule", seed).text)
    assert len(tokenize(mask_variant(s, "<mask>").text, ("<mask>",))) == len(tokenize(s))


# llm-mode jabberwocky ---------------------------------------------------------

class _Canned:
    def __init__(self, text):
        self.text = text

    def generate(self, prompt, params):
        return self.text


def test_parse_llm_output():
    assert parse_llm_jabberwocky("Input: 'a'\nOutput: 'b'\nInput: 'c'\nOutput: 'the zib'\nmore") == "the zib"
    assert parse_llm_jabberwocky("no marker") is None


def test_llm_jabberwocky_accepts_valid():
    v = jabberwocky_variant("the cat sat", "llm", 1, backend=_Canned("Output: 'the blick florped'"), prompt="p")
    assert v.text == "the blick florped" and not v.fallback


@pytest.mark.parametrize("raw", ["Output: 'a cat sat'", "Output: 'the cat florped'", "garbage"])
def test_llm_jabberwocky_falls_back(raw):
    v = jabberwocky_variant("the cat sat", "llm", 1, backend=_Canned(raw), prompt="p")
    assert v.fallback
    assert v.text == jabberwocky_variant("the cat sat", "rule", 1).text


def test_llm_jabberwocky_on_mock(profile):
    lm = MockLM(MockLmConfig())
    v = jabberwocky_variant("the cat sat", "llm", 2, profile.params("jabberwocky_generation", 2), lm,
                            profile.jabberwocky("the cat sat"))
    assert preserves_function_words("the cat sat", v.text)
