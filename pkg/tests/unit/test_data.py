"""
Tests unitaires pour les données: écriture, translittération, corpus,
gabarits d'instructions et validateurs.
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btxforge.data.corpus import (
    CorpusDomain,
    CorpusSpec,
    Language,
    convert,
    default_lexicon,
    generate_code_switched_chats,
    generate_corpus,
    generate_parallel,
)
from btxforge.data.records import (
    Conversation,
    Message,
    PreferencePair,
    Role,
    SentenceRecord,
    read_jsonl,
    split_holdout,
    write_jsonl,
)
from btxforge.data.script import ScriptLabel, classify_script, latin_word_share
from btxforge.data.templates import (
    Task,
    Variant,
    fill_template,
    generate_instructions,
    instantiate_template,
)
from btxforge.data.transliteration import Direction, TransliterationTable, default_table, transliterate
from btxforge.data.validators import (
    RULE_EMPTY_MESSAGE,
    RULE_LENGTH_RATIO,
    RULE_NO_ASSISTANT_REPLY,
    RULE_ROLE_FLOW,
    filter_by_length,
    length_ratio,
    validate_conversations,
)
from btxforge.errors import DataValidationError, TemplateError, TransliterationTableError


def _conversation(*turns, **fields) -> Conversation:
    roles = [Role.USER, Role.ASSISTANT]
    return Conversation(
        messages=[Message(role=roles[i % 2], content=c) for i, c in enumerate(turns)],
        **fields,
    )


class TestScript:
    """Tests pour classify_script."""

    @pytest.mark.parametrize("text,label", [
        ("حاجة جامدة", ScriptLabel.ARABIC),
        ("7aga gameda", ScriptLabel.LATIN),
        ("7aga حاجة", ScriptLabel.MIXED),
        ("... !", ScriptLabel.OTHER),
    ])
    def test_labels(self, text, label):
        assert classify_script(text).label == label

    def test_latin_word_share(self):
        assert latin_word_share("انا ray7 الشغل") == (1, 3)


class TestTransliteration:
    """Tests pour la translittération Arabizi."""

    def test_known_example(self):
        assert transliterate("حاجة جامدة", Direction.TO_LATIN) == "7aga gameda"
        assert transliterate("7aga gameda", "to_arabic") == "حاجة جامدة"

    def test_unknown_characters_pass_through(self):
        assert transliterate("WiFi؟", Direction.TO_LATIN) == "WiFi؟"

    def test_lexicon_round_trip(self):
        """Bijection sur tout le lexique du générateur."""
        table = default_table()
        for word in default_lexicon().words:
            assert table.to_arabic(table.to_latin(word)) == word

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(default_lexicon().words), min_size=1, max_size=8))
    def test_sentence_round_trip(self, words):
        sentence = " ".join(words)
        assert transliterate(transliterate(sentence, "to_latin"), "to_arabic") == sentence

    def test_empty_table(self):
        with pytest.raises(TransliterationTableError):
            TransliterationTable.from_lines(["# rien"])

    def test_duplicate_side(self):
        with pytest.raises(TransliterationTableError, match="duplicate"):
            TransliterationTable.from_lines(["ب\tb", "ت\tb", "م\tm"])

    def test_word_final_marker_both_sides(self):
        with pytest.raises(TransliterationTableError, match="word-final"):
            TransliterationTable.from_lines(["ب\tb", "ة$\ta"])

    def test_malformed_line(self):
        with pytest.raises(TransliterationTableError, match="line 1"):
            TransliterationTable.from_lines(["ب b"])


class TestCorpus:
    """Tests pour generate_corpus et convert."""

    def test_exact_latin_allocation(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=40, latin_ratio=0.25, seed=1))
        latin = [s for s in corpus if s.script == ScriptLabel.LATIN]
        assert len(latin) == 10
        assert all(classify_script(s.text).label == s.script for s in corpus)

    def test_deterministic_per_seed(self):
        spec = CorpusSpec(n_sentences=10, seed=7, noise_level=0.2)
        assert generate_corpus(spec) == generate_corpus(spec)
        assert generate_corpus(spec) != generate_corpus(spec.model_copy(update={"seed": 8}))

    def test_sentence_lengths(self):
        for sentence in generate_corpus(CorpusSpec(n_sentences=20, seed=3)):
            assert 6 <= len(sentence.text.split()) <= 12

    def test_base_domain_is_english_glosses(self):
        corpus = generate_corpus(CorpusSpec(n_sentences=5, seed=2, domain=CorpusDomain.BASE, latin_ratio=0.0))
        assert all(s.script == ScriptLabel.LATIN for s in corpus)
        assert all(s.text.replace(" ", "").isascii() for s in corpus)

    def test_record_conversion(self):
        sentence = generate_corpus(CorpusSpec(n_sentences=1, seed=0))[0]
        record = sentence.to_record()
        assert record.domain == "branch_arabic"
        assert type(sentence).from_record(record) == sentence

    def test_convert_through_pivot(self):
        arabic = "بيت كتاب"
        assert convert(arabic, Language.EGYPTIAN, Language.ENGLISH) == "house book"
        franco = convert(arabic, Language.EGYPTIAN, Language.FRANCO)
        assert convert(franco, Language.FRANCO, Language.ENGLISH) == "house book"
        assert convert("house book", Language.ENGLISH, Language.EGYPTIAN) == arabic

    def test_convert_same_language(self):
        with pytest.raises(TemplateError):
            convert("بيت", Language.EGYPTIAN, Language.EGYPTIAN)

    def test_parallel_records(self):
        records = generate_parallel(3, Language.EGYPTIAN, Language.FRANCO, seed=4)
        assert len(records) == 3
        assert all(classify_script(r.tgt).label == ScriptLabel.LATIN for r in records)

    def test_code_switched_chats(self):
        chats = generate_code_switched_chats(30, seed=5)
        assert [c.id for c in chats[:2]] == ["chat-00000", "chat-00001"]
        assert all(c.messages[-1].role == Role.ASSISTANT for c in chats)
        assert any(latin_word_share(c.messages[-1].content)[0] > 0 for c in chats)
        assert any(latin_word_share(c.messages[0].content)[0] > 0 for c in chats)


class TestTemplates:
    """Tests pour les gabarits d'instructions."""

    def test_unfilled_placeholder(self):
        with pytest.raises(TemplateError, match=r"\[target language\]"):
            fill_template("لل[target language]:\n[source text]", {"[source text]": "x"})

    def test_single_carries_pair(self):
        conversation = instantiate_template(Task.TRANSLITERATE, "حاجة جامدة", Language.EGYPTIAN,
                                            Language.FRANCO, Variant.SINGLE, seed=0)
        assert conversation.has_pair
        assert conversation.messages[1].content == "7aga gameda"
        assert "حاجة جامدة" in conversation.messages[0].content

    def test_few_shot_has_examples_in_prompt(self):
        conversation = instantiate_template(Task.TRANSLITERATE, "حاجة جامدة", Language.EGYPTIAN,
                                            Language.FRANCO, Variant.FEW_SHOT, seed=1)
        assert len(conversation.messages) == 2
        assert conversation.messages[0].content.count("\n\n") == 3

    def test_multi_turn_alternates(self):
        conversation = instantiate_template(Task.TRANSLATE, "بيت", Language.EGYPTIAN,
                                            Language.ENGLISH, Variant.MULTI_TURN, seed=2)
        assert [m.role for m in conversation.messages] == [Role.USER, Role.ASSISTANT] * 3
        assert conversation.messages[1].content == "house"

    @pytest.mark.parametrize("task,src,tgt", [
        (Task.TRANSLITERATE, Language.EGYPTIAN, Language.ENGLISH),
        (Task.TRANSLATE, Language.EGYPTIAN, Language.FRANCO),
        (Task.TRANSLATE, Language.ENGLISH, Language.ENGLISH),
    ])
    def test_unsupported_direction(self, task, src, tgt):
        with pytest.raises(TemplateError):
            instantiate_template(task, "بيت", src, tgt)

    def test_empty_source(self):
        with pytest.raises(TemplateError):
            instantiate_template(Task.TRANSLITERATE, "  ", Language.EGYPTIAN, Language.FRANCO)

    def test_generated_instructions_valid(self):
        conversations = generate_instructions(40, seed=9, english_fraction=0.1)
        assert len(conversations) == 40
        assert sum(1 for c in conversations if c.category == "translate") == 4
        rules = set(validate_conversations(conversations).by_rule())
        assert rules <= {RULE_LENGTH_RATIO}


class TestValidators:
    """Tests pour validate_conversations."""

    def test_rules(self):
        dataset = [
            _conversation("ezayak", "الحمد لله", id="ok"),
            Conversation(id="flow", messages=[Message(role=Role.ASSISTANT, content="x")]),
            _conversation("ezayak", "   ", id="empty"),
            _conversation("a", "b", id="ratio", src="abcdefghij", tgt="abc"),
            _conversation("ezayak"),
        ]
        report = validate_conversations(dataset)
        assert [c.id for c in report.accepted] == ["ok"]
        assert [(r.record_id, r.rule) for r in report.rejections] == [
            ("flow", RULE_ROLE_FLOW),
            ("empty", RULE_EMPTY_MESSAGE),
            ("ratio", RULE_LENGTH_RATIO),
            ("4", RULE_NO_ASSISTANT_REPLY),
        ]
        assert report.by_rule() == {
            RULE_ROLE_FLOW: 1, RULE_EMPTY_MESSAGE: 1, RULE_LENGTH_RATIO: 1, RULE_NO_ASSISTANT_REPLY: 1,
        }

    def test_alternation_starting_with_user(self):
        """user, assistant, user, assistant: accepté; deux tours utilisateur de suite: role-flow."""
        assert validate_conversations([_conversation("ezayak", "تمام", "w enta", "الحمد لله")]).n_rejected == 0
        doubled = Conversation(id="d", messages=[
            Message(role=Role.USER, content="ezayak"),
            Message(role=Role.USER, content="ezayak"),
            Message(role=Role.ASSISTANT, content="تمام"),
        ])
        assert validate_conversations([doubled]).rejections[0].rule == RULE_ROLE_FLOW

    @pytest.mark.parametrize("source_len,target_len,accepted", [
        (7, 10, True),
        (69, 100, False),
        (10, 7, True),
        (5, 10, False),
    ])
    def test_length_ratio_boundary(self, source_len, target_len, accepted):
        """0.7 exactement: accepté; 0.69: rejeté."""
        conversation = _conversation("a", "b", id="pair", src="x" * source_len, tgt="y" * target_len)
        report = validate_conversations([conversation])
        assert (report.n_rejected == 0) is accepted
        if not accepted:
            assert report.rejections[0].rule == RULE_LENGTH_RATIO

    def test_system_message_allowed(self):
        conversation = Conversation(messages=[
            Message(role=Role.SYSTEM, content="انت مساعد"),
            Message(role=Role.USER, content="ezayak"),
            Message(role=Role.ASSISTANT, content="تمام"),
        ])
        assert validate_conversations([conversation]).n_rejected == 0

    def test_length_ratio(self):
        assert length_ratio("", "") == 1.0
        assert length_ratio("abcd", "ab") == 0.5

    def test_filter_by_length(self):
        assert filter_by_length(["a b", "a b c d"], 3, 5) == ["a b c d"]
        with pytest.raises(DataValidationError):
            filter_by_length(["a"], 5, 3)


class TestRecords:
    """Tests pour les enregistrements JSONL."""

    def test_jsonl_round_trip(self, tmp_path, chat):
        path = tmp_path / "chats.jsonl"
        assert write_jsonl([chat], path) == 1
        assert "الحمد" in path.read_text(encoding="utf-8")
        assert read_jsonl(path, Conversation) == [chat]

    def test_invalid_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text": "x", "script": "latin", "domain": "base_domain"}\n{"text": 1}\n', encoding="utf-8")
        with pytest.raises(DataValidationError, match="bad.jsonl:2"):
            read_jsonl(path, SentenceRecord)

    def test_pair_must_differ(self):
        with pytest.raises(ValueError):
            PreferencePair(prompt=[Message(role=Role.USER, content="q")], chosen="a", rejected="a")

    def test_pair_prompt_ends_with_user(self):
        with pytest.raises(ValueError):
            PreferencePair(prompt=[Message(role=Role.ASSISTANT, content="q")], chosen="a", rejected="b")

    def test_split_holdout(self):
        train, heldout = split_holdout(list(range(20)), fraction=0.1, seed=0)
        assert len(heldout) == 2
        assert sorted(train + heldout) == list(range(20))
        assert train == sorted(train)
        with pytest.raises(DataValidationError):
            split_holdout([1, 2], fraction=1.0)
