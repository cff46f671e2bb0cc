"""Conversational recommender that tracks dialogue state as a reasoning tree.

Entities mentioned across a conversation are organized into a rooted tree
whose branches are chains of causally linked mentions. Branch representations
fused with utterance semantics score the next entity to recommend, and the
selected branches steer response generation.
"""

__version__ = "0.1.0"
