import asyncio
import typing

from pathlib import Path

import ezmsg.core as ez

from ezmsg.util.messagelogger import MessageLogger, MessageLoggerSettings

from .config import RunSettings
from .session import Session, build_session
from .engine import EncryptedModel
from .federation import IterationMetrics
from .errors import TrainingComplete, TrainingEndedEarly


class FederatedTrainerSettings(ez.Settings):
    run: RunSettings
    iterations: typing.Optional[int] = None


class FederatedTrainerState(ez.State):
    session: Session
    model: EncryptedModel
    remaining: int


class FederatedTrainer(ez.Unit):
    """ Runs the federation one global iteration at a time and publishes its metrics """

    SETTINGS = FederatedTrainerSettings
    STATE = FederatedTrainerState

    OUTPUT_METRICS = ez.OutputStream(IterationMetrics)

    async def initialize(self) -> None:
        self.STATE.session = build_session(self.SETTINGS.run)
        self.STATE.model = self.STATE.session.federation.prepare_phase()
        iterations = self.SETTINGS.iterations
        self.STATE.remaining = self.STATE.session.spec.iterations if iterations is None else iterations

    @ez.publisher(OUTPUT_METRICS)
    async def train(self) -> typing.AsyncGenerator:
        federation = self.STATE.session.federation
        try:
            while True:
                if self.STATE.remaining <= 0:
                    raise TrainingComplete()
                self.STATE.model, history = federation.train(iterations = 1, model = self.STATE.model)
                self.STATE.remaining -= 1
                for metrics in history:
                    yield self.OUTPUT_METRICS, metrics
                # Let subscribers drain between iterations
                await asyncio.sleep(0)

        except TrainingEndedEarly:
            ez.logger.warning(f'{self.name} - Training ended early')

        except TrainingComplete:
            ez.logger.info(f'{self.name} - Training complete at iteration {self.STATE.model.iteration}')

        raise ez.NormalTermination


class FederatedTrainingSettings(ez.Settings):
    run: RunSettings
    log: typing.Optional[Path] = None


class FederatedTraining(ez.Collection):
    """ Trainer plus a MessageLogger recording every IterationMetrics """

    SETTINGS = FederatedTrainingSettings

    TRAINER = FederatedTrainer()
    LOGGER = MessageLogger()

    OUTPUT_METRICS = ez.OutputStream(IterationMetrics)

    def configure(self) -> None:
        self.TRAINER.apply_settings(FederatedTrainerSettings(run = self.SETTINGS.run))
        log = self.SETTINGS.log
        if log is None:
            log = self.SETTINGS.run.output / 'metrics-stream.txt'
        self.LOGGER.apply_settings(MessageLoggerSettings(output = log))

    def network(self) -> ez.NetworkDefinition:
        return (
            (self.TRAINER.OUTPUT_METRICS, self.LOGGER.INPUT_MESSAGE),
            (self.TRAINER.OUTPUT_METRICS, self.OUTPUT_METRICS),
        )


def run_graph(settings: RunSettings, log: typing.Optional[Path] = None) -> None:
    """ Train inside an ezmsg graph instead of the plain loop """
    settings.output.mkdir(parents = True, exist_ok = True)
    training = FederatedTraining(FederatedTrainingSettings(run = settings, log = log))
    ez.run(TRAINING = training)
