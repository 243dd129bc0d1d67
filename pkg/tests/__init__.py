"""Tests del detector few-shot

Organizados por componente (ffa, query_transfer, fusion, detector, rpn,
dataset/episodios, evaluador, checkpoints, trainer, CLI...). Los oráculos de
referencia viven en oracles.py y solo dependen de numpy.
"""
