"""A small synthetic language for training and ablation experiments.

Sentences are drawn from a handful of templates whose slots are filled
uniformly from word classes.  Within the whole lexicon every abbreviation
is unique, so the initials of a masked word identify it, while the
surrounding context says nothing about which member of a class fills a
slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SegmentedSentence
from .pinyin import PinyinTable, abbreviation_of, builtin_table

WORD_CLASSES: dict[str, tuple[str, ...]] = {
    "subject": ("我们", "你们", "他们", "老师", "学生", "医生", "朋友", "妈妈", "爸爸", "同学",
                "记者", "演员", "警察", "工人", "农民", "司机", "律师", "画家", "歌手", "厨师"),
    "adverb": ("经常", "偶尔", "总是", "已经", "突然", "马上", "终于", "一直", "互相", "悄悄"),
    "verb": ("喜欢", "讨厌", "购买", "需要", "寻找", "研究", "放弃", "参观", "打扫", "准备",
             "学习", "讨论", "修理", "借用", "描写", "表演", "翻译", "检查", "收集", "保护"),
    "object": ("音乐", "电脑", "媒体", "梦想", "苹果", "汽车", "电影", "足球", "咖啡", "地图",
               "钢琴", "照片", "衣服", "手机", "自行车", "图书馆", "博物馆", "巧克力", "游乐园",
               "一无是处"),
    "place": ("学校", "公园", "家里", "医院", "商店", "北京", "上海", "广场", "食堂", "车站"),
}

TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("subject", "adverb", "在", "place", "verb", "object"),
    ("subject", "adverb", "verb", "了", "object"),
    ("place", "的", "subject", "verb", "object"),
    ("subject", "也", "verb", "object"),
)


@dataclass(frozen=True)
class ToyLanguage:
    classes: dict[str, tuple[str, ...]]
    templates: tuple[tuple[str, ...], ...] = TEMPLATES

    @classmethod
    def default(cls, table: PinyinTable | None = None) -> "ToyLanguage":
        """The built-in lexicon, keeping only the first word for each abbreviation."""
        table = table or builtin_table()
        seen = {abbreviation_of(table, w) for t in TEMPLATES for w in t if w not in WORD_CLASSES}
        classes = {}
        for name, words in WORD_CLASSES.items():
            keep = []
            for w in words:
                a = abbreviation_of(table, w)
                if a not in seen:
                    seen.add(a)
                    keep.append(w)
            classes[name] = tuple(keep)
        return cls(classes)

    @property
    def lexicon(self) -> list[str]:
        words = [w for ws in self.classes.values() for w in ws]
        words += sorted({w for t in self.templates for w in t if w not in self.classes})
        return words

    def sentence(self, rng: np.random.Generator) -> SegmentedSentence:
        template = self.templates[int(rng.integers(len(self.templates)))]
        words = []
        for slot in template:
            pool = self.classes.get(slot)
            words.append(pool[int(rng.integers(len(pool)))] if pool else slot)
        return SegmentedSentence(tuple(words))

    def corpus(self, n: int, seed: int = 0, exclude=(), unique: bool = True) -> list[SegmentedSentence]:
        """``n`` sentences, distinct from each other (if ``unique``) and from ``exclude``."""
        rng = np.random.default_rng(seed)
        banned = {s.words for s in exclude}
        out: list[SegmentedSentence] = []
        seen: set[tuple[str, ...]] = set()
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 1000 * n + 1000:
                raise RuntimeError("could not draw enough distinct sentences")
            s = self.sentence(rng)
            if s.words in banned or (unique and s.words in seen):
                continue
            seen.add(s.words)
            out.append(SegmentedSentence(s.words, len(out) + 1))
        return out


def toy_corpus(n: int = 200, seed: int = 0) -> list[SegmentedSentence]:
    return ToyLanguage.default().corpus(n, seed)
