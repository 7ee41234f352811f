"""
Типизированные исключения вычислительного ядра
"""


class SheLabError(Exception):
    """
    Базовое исключение лаборатории
    """

    exit_code = 1
    kind = 'error'


class ValidationError(SheLabError, ValueError):
    """
    Некорректные входные данные, нарушение предусловий или конфигурации
    """

    exit_code = 2
    kind = 'validation'


class FieldWindowError(ValidationError):
    """
    Запрос поля вне временного окна реализации
    """

    kind = 'field_window'


class StatisticalGuardError(SheLabError):
    """
    Сработала статистическая защита: малый ESS, вырожденный знаменатель,
    расхождение маршрутов или неудачная аппроксимация
    """

    exit_code = 3
    kind = 'statistical_guard'


class NumericalError(SheLabError, ArithmeticError):
    """
    NaN/Inf в сеточном решении
    """

    exit_code = 3
    kind = 'numerical'
