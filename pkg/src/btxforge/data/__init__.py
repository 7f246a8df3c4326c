"""
Données synthétiques à double écriture (arabe / Arabizi).
"""

from btxforge.data.corpus import (
    CorpusDomain,
    CorpusSpec,
    Language,
    Lexicon,
    TaggedSentence,
    convert,
    default_lexicon,
    generate_code_switched_chats,
    generate_corpus,
    generate_parallel,
)
from btxforge.data.corrector import KEEP_IN_LATIN, synth_corrector
from btxforge.data.records import (
    Conversation,
    ConversationRecord,
    Message,
    ParallelRecord,
    PreferencePair,
    PreferenceRecord,
    Role,
    SentenceRecord,
    read_jsonl,
    split_holdout,
    write_jsonl,
)
from btxforge.data.script import Script, ScriptLabel, classify_script, latin_word_share
from btxforge.data.templates import Task, Variant, generate_instructions, instantiate_template
from btxforge.data.transliteration import (
    Direction,
    TransliterationTable,
    default_table,
    transliterate,
)
from btxforge.data.validators import (
    ValidationReport,
    filter_by_length,
    validate_conversations,
)

__all__ = [
    "Conversation",
    "ConversationRecord",
    "CorpusDomain",
    "CorpusSpec",
    "Direction",
    "KEEP_IN_LATIN",
    "Language",
    "Lexicon",
    "Message",
    "ParallelRecord",
    "PreferencePair",
    "PreferenceRecord",
    "Role",
    "Script",
    "ScriptLabel",
    "SentenceRecord",
    "TaggedSentence",
    "Task",
    "TransliterationTable",
    "ValidationReport",
    "Variant",
    "classify_script",
    "convert",
    "default_lexicon",
    "default_table",
    "filter_by_length",
    "generate_code_switched_chats",
    "generate_corpus",
    "generate_instructions",
    "generate_parallel",
    "instantiate_template",
    "latin_word_share",
    "read_jsonl",
    "split_holdout",
    "synth_corrector",
    "transliterate",
    "validate_conversations",
    "write_jsonl",
]
