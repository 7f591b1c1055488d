from base import AgcnTest

from mlagcn import runkit


class AgcnDeterminism(AgcnTest):
    def name(self):
        return "mlagcn_determinism"

    def get_properties(self):
        properties = super().get_properties()
        properties['train']['epochs'] = 5
        return properties

    def do_test(self, data):
        first = runkit.train_single(self.make_config(), data['train'], data['val'])
        second = runkit.train_single(self.make_config(), data['train'], data['val'])
        self.assertEqual(first.metrics_csv(), second.metrics_csv())
        self.assertEqual(first.config_digest, second.config_digest)
